import numpy as np
import pytest

from duplexrag.backends import RetrievalOutcome
from duplexrag.engine import RetrievalJob
from duplexrag.metrics import (
    AliasKeywordExtractor,
    HttpKeywordExtractor,
    TimedWord,
    collect_metric_values,
    constraint_verdict,
    e2ekd,
    export_histograms,
    histogram,
    keyword_delay,
    read_histogram_csv,
    retrieval_delay,
    ttfat,
)
from duplexrag.backends import PromptTemplate
from duplexrag.datasynth import sample_training_delay
from duplexrag.stubserver import StubServer
from duplexrag.tokens import TokenFrame


def frames_with_speech_from(start, n=100):
    return [TokenFrame(k, model_audio=(1,) * 8 if k >= start else (0,) * 8) for k in range(n)]


def test_ttfat_cases():
    assert ttfat(frames_with_speech_from(25), 2.0) == 0.0
    assert ttfat(frames_with_speech_from(40), 2.0) == pytest.approx(1.2)
    assert ttfat(frames_with_speech_from(1000), 2.0) is None


def test_ttfat_model_already_speaking():
    assert ttfat(frames_with_speech_from(0), 2.0) == 0.0


def test_keyword_delay_cases():
    words = [TimedWord("Paris", 1.0), TimedWord("is", 1.3)]
    assert keyword_delay(words, "paris", 1.0) == 0.0
    words = [TimedWord("the", 2.0), TimedWord("answer", 3.0), TimedWord("Paris.", 5.1)]
    assert keyword_delay(words, "Paris", 2.0) == 3.1
    words = [TimedWord("it", 0.0), TimedWord("is", 0.33), TimedWord("Mount", 0.66), TimedWord("Everest,", 1.0)]
    assert keyword_delay(words, "mount everest", 0.0) == 0.66
    assert keyword_delay(words, "kilimanjaro", 0.0) is None


@pytest.mark.parametrize("ttfat_s, kd_s", [(0.0, 3.1), (0.0, 2.1), (1.0, 3.8)])
def test_e2ekd_sums(ttfat_s, kd_s):
    user_end = 10.0
    onset = user_end + ttfat_s + kd_s
    words = [TimedWord("so", user_end + ttfat_s), TimedWord("keyword", onset)]
    assert e2ekd(words, "keyword", user_end) == round(ttfat_s + kd_s, 6)
    assert keyword_delay(words, "keyword", user_end + ttfat_s) == kd_s


def test_non_monotone_words_rejected():
    with pytest.raises(ValueError):
        e2ekd([TimedWord("a", 2.0), TimedWord("b", 1.0)], "b", 0.0)


def job(trigger, completed_frame, latency=0.8, settle=0.5):
    t = trigger / 12.5
    return RetrievalJob(0, trigger, t, settle, t + settle, trigger + 6, RetrievalOutcome(status="ok", latency_s=latency),
                        t + settle + latency, completed_frame)


def test_retrieval_delay_and_verdict():
    assert retrieval_delay(job(10, 26)) == 1.3
    assert constraint_verdict(job(10, 40), 50) is True
    assert constraint_verdict(job(10, 55), 50) is False
    assert constraint_verdict(job(10, 50), 50) is False


def test_histogram_single_bin():
    rows = histogram([1.3] * 100, [1.0, 1.5, 2.0])
    assert rows == [(1.0, 1.5, 1.0), (1.5, 2.0, 0.0)]


def test_histogram_overflow_rows():
    rows = histogram([-1.0, 0.5, 9.0, 9.0], [0.0, 1.0])
    assert rows[0][0] == -np.inf and rows[0][2] == 0.25
    assert rows[-1][1] == np.inf and rows[-1][2] == 0.5
    assert sum(r[2] for r in rows) == pytest.approx(1.0)


def test_histogram_sampler_mass():
    rng = np.random.default_rng(5)
    x = [sample_training_delay(4.0, rng) for _ in range(100_000)]
    rows = histogram(x, [0.0, 1.0, 3.0, 4.0])
    inner = [m for lo, hi, m in rows if lo == 1.0 and hi == 3.0][0]
    assert abs(inner - 0.9) <= 0.01


def test_export_row_counts(tmp_path):
    rng = np.random.default_rng(0)
    reports = []
    for k in range(10):
        rec = {"ttfat_s": float(rng.uniform(0, 1)), "kd_s": float(rng.uniform(2, 4)),
               "e2ekd_s": None, "retrieval_delay_s": None}
        if k % 3:
            rec["retrieval_delay_s"] = 1.3
        reports.append(rec)
    path = tmp_path / "h.csv"
    counts = export_histograms(reports, [0.0, 1.0, 2.0, 3.0, 4.0], path)
    assert counts == {"ttfat_s": 10, "kd_s": 10, "retrieval_delay_s": 6}
    rows = read_histogram_csv(path)
    assert path.read_text().splitlines()[0] == "metric,bin_lo,bin_hi,mass"
    for metric, n in counts.items():
        masses = [r["mass"] for r in rows if r["metric"] == metric]
        assert sum(round(m * n) for m in masses) == n
    assert collect_metric_values(reports)["retrieval_delay_s"] == [1.3] * 6


def test_export_empty_raises(tmp_path):
    with pytest.raises(ValueError):
        export_histograms([], 10, tmp_path / "h.csv")


def test_alias_extractor():
    ex = AliasKeywordExtractor()
    assert ex.extract("", "It was Neil Armstrong, in 1969.", ["Buzz Aldrin", "Neil Armstrong"]) == "neil armstrong"
    assert ex.extract("", "Nobody knows.", ["Armstrong"]) is None


def test_http_judge_extractor():
    tpl = PromptTemplate("judge", "Q: $question\nR: $response")
    with StubServer("Paris") as stub:
        kw = HttpKeywordExtractor(stub.url, tpl).extract("capital of France?", "It is Paris, of course.", ["Paris"])
    assert kw == "paris"
    assert "R: It is Paris, of course." in stub.requests[0]["prompt"]
    with StubServer("Lyon") as stub:
        assert HttpKeywordExtractor(stub.url, tpl).extract("q", "It is Paris.", []) is None
