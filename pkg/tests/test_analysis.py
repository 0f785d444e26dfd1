import pandas as pd
import pytest

from analysis.quick_summary import summarize_comparison
from analysis.simple_charts import plot_comparison, plot_history


@pytest.fixture
def table_csv(tmp_path):
    rows = []
    for method, offset in (("noisy", 0.0), ("relunet", 4.0), ("mvdr", 2.0)):
        for i in range(3):
            rows.append({"method": method, "item_id": f"item_{i:04d}", "condition": "white", "channels": 6,
                         "si_sdr": offset + i, "stoi": 0.5 + offset / 10})
    path = tmp_path / "table.csv"
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def test_summary_ranks_methods(table_csv, capsys):
    summary = summarize_comparison(table_csv)
    assert summary.index.tolist() == ["relunet", "mvdr", "noisy"]
    assert summary.loc["relunet", "si_sdr_gain"] == pytest.approx(4.0)
    assert summary.loc["noisy", "items"] == 3
    assert "relunet" in capsys.readouterr().out


def test_summary_rejects_empty(tmp_path):
    path = tmp_path / "empty.csv"
    pd.DataFrame(columns=["method", "item_id"]).to_csv(path, index=False)
    with pytest.raises(ValueError):
        summarize_comparison(path)


def test_charts_written(tmp_path, table_csv):
    history = tmp_path / "history.csv"
    pd.DataFrame({"step": [1, 2, 3], "train_loss": [3.0, 2.0, 1.0],
                  "val_loss": [3.5, None, 1.5]}).to_csv(history, index=False)
    assert (tmp_path / "h.png").exists() is False
    plot_history(history, str(tmp_path / "h.png"))
    plot_comparison(table_csv, str(tmp_path / "c.png"))
    assert (tmp_path / "h.png").stat().st_size > 0
    assert (tmp_path / "c.png").stat().st_size > 0
