# RelUNet Speech Enhancement - Core Modules
