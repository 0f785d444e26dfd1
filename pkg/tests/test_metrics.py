import numpy as np
import pandas as pd
import pytest

from src import metrics
from src.errors import ConfigError, EmptyDatasetError, ShapeMismatchError, SignalTooShortError, SilentInputError
from src.scene_simulator import procedural_source


@pytest.fixture
def speech():
    rng = np.random.default_rng(7)
    # broadband floor keeps every third-octave band populated
    return procedural_source(rng, 48000) + 0.02 * rng.standard_normal(48000)


def _with_noise(x, snr_db, seed):
    noise = np.random.default_rng(seed).standard_normal(len(x))
    noise *= np.sqrt(np.sum(x ** 2) / (np.sum(noise ** 2) * 10 ** (snr_db / 10)))
    return x + noise


# ----------------------------
# SI-SDR
# ----------------------------
def test_si_sdr_identity_and_scale(rng):
    x = rng.standard_normal(1000)
    assert metrics.si_sdr(x, x) == float("inf")
    noisy = x + 0.3 * rng.standard_normal(1000)
    base = metrics.si_sdr(noisy, x)
    assert metrics.si_sdr(-2.5 * noisy, x) == pytest.approx(base, abs=1e-9)
    assert metrics.si_sdr(noisy + 4.0, x) == pytest.approx(base, abs=1e-9)


def test_si_sdr_orthogonal_residual(rng):
    r = rng.standard_normal(2000)
    r -= r.mean()
    w = rng.standard_normal(2000)
    w -= w.mean()
    w -= np.dot(w, r) / np.dot(r, r) * r
    w *= np.sqrt(np.sum(r ** 2) / (10 * np.sum(w ** 2)))
    assert metrics.si_sdr(r + w, r) == pytest.approx(10.0, abs=1e-9)


def test_si_sdr_errors():
    with pytest.raises(SilentInputError):
        metrics.si_sdr(np.ones(10), np.full(10, 3.0))
    with pytest.raises(ShapeMismatchError):
        metrics.si_sdr(np.ones(10), np.ones(11))


# ----------------------------
# STOI
# ----------------------------
def test_stoi_identity(speech):
    assert metrics.stoi(speech, speech) == pytest.approx(1.0, abs=1e-9)


def test_stoi_monotone_in_noise(speech):
    strong = metrics.stoi(_with_noise(speech, -10.0, 0), speech)
    weak = metrics.stoi(_with_noise(speech, 20.0, 0), speech)
    assert -1.0 <= strong < weak <= 1.0


def test_stoi_independent_noise_is_low(speech):
    noise = np.random.default_rng(3).standard_normal(len(speech))
    assert metrics.stoi(noise, speech) < 0.35


def test_stoi_errors(speech):
    with pytest.raises(SignalTooShortError):
        metrics.stoi(speech[:4800], speech[:4800])
    with pytest.raises(SilentInputError):
        metrics.stoi(speech, np.zeros(len(speech)))


# ----------------------------
# Reports
# ----------------------------
def test_parse_metrics():
    assert metrics.parse_metrics("si_sdr, stoi") == ("si_sdr", "stoi")
    with pytest.raises(ConfigError):
        metrics.parse_metrics("pesq")
    with pytest.raises(ConfigError):
        metrics.parse_metrics(" , ")


def test_single_pair_report(rng):
    x = rng.standard_normal(500)
    y = x + 0.1 * rng.standard_normal(500)
    report = metrics.evaluate([(y, x)], metrics=("si_sdr",))
    assert report.mean("si_sdr") == metrics.si_sdr(y, x)
    assert report.count("si_sdr") == 1
    assert report.conditions == ["all"]


def test_grouped_report_and_csv(rng, tmp_path):
    refs = [rng.standard_normal(400) for _ in range(4)]
    pairs = [(r + s * rng.standard_normal(400), r) for r, s in zip(refs, (0.1, 0.2, 0.5, 1.0))]
    report = metrics.evaluate(pairs, labels=["white", "white", "pink", "pink"], metrics=("si_sdr",))

    values = report.items["value"].to_numpy()
    assert sorted(report.conditions) == ["pink", "white"]
    assert report.mean("si_sdr", "white") == pytest.approx(values[:2].mean(), abs=1e-12)
    assert report.mean("si_sdr", "pink") == pytest.approx(values[2:].mean(), abs=1e-12)
    assert report.mean("si_sdr") == pytest.approx(values.mean(), abs=1e-12)

    path = tmp_path / "report.csv"
    report.write_csv(path)
    table = pd.read_csv(path)
    assert list(table.columns) == ["condition", "metric", "item_id", "value"]
    means = table[table["item_id"] == "mean"]
    assert set(means["condition"]) == {"white", "pink", "overall"}
    counts = table[table["item_id"] == "count"].set_index("condition")["value"]
    assert counts["overall"] == 4 and counts["white"] == 2


def test_improvement_delta(rng):
    clean = [rng.standard_normal(600) for _ in range(3)]
    noisy = [c + rng.standard_normal(600) for c in clean]
    enhanced = [c + 0.1 * (n - c) for c, n in zip(clean, noisy)]
    before = metrics.evaluate(list(zip(noisy, clean)), metrics=("si_sdr",))
    after = metrics.evaluate(list(zip(enhanced, clean)), metrics=("si_sdr",))
    assert metrics.improvement(before, after, "si_sdr") == pytest.approx(20.0, abs=1.0)


def test_evaluate_errors(rng):
    x = rng.standard_normal(100)
    with pytest.raises(EmptyDatasetError):
        metrics.evaluate([])
    with pytest.raises(ShapeMismatchError):
        metrics.evaluate([(x, x[:50])], metrics=("si_sdr",))
    with pytest.raises(ShapeMismatchError):
        metrics.evaluate([(x, x)], labels=["a", "b"], metrics=("si_sdr",))
    with pytest.raises(ConfigError):
        metrics.evaluate([(x, x)], metrics=("pesq",))
