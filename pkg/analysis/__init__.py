# RelUNet Speech Enhancement - Analysis Modules
