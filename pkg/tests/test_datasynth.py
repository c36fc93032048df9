import copy
import json
import math

import numpy as np
import pytest

from conftest import plain_script, rag_script
from duplexrag.datasynth import (
    AlignedToken,
    AlignedTurn,
    ConversationScript,
    ScriptError,
    SynthConfig,
    align_script,
    build_training_examples,
    draw_training_delay,
    drop_greeting,
    gate_audio,
    load_alignment,
    place_ret,
    render_frames,
    sample_training_delay,
    validate_dataset_record,
)
from duplexrag.seeding import rng_for
from duplexrag.timebase import seconds_to_frames
from duplexrag.tokens import RET, find_ret


def aligned_rag_turn(lead_frame):
    script = rag_script()
    turn = script.turns[1]
    toks = [AlignedToken(1, j, seg, w, 0.0, lead_frame + 4 * j) for j, (seg, w) in enumerate(turn.words())]
    return AlignedTurn(1, turn, toks, 10.0)


def test_place_ret():
    assert place_ret(aligned_rag_turn(12)) == 11
    with pytest.raises(ScriptError):
        place_ret(aligned_rag_turn(0))


def test_two_rag_turns_get_two_rets(tmp_path, scripts):
    # greeting removed: user, retrieval, user, retrieval, user
    script = drop_greeting(scripts["everest"], 1.0, np.random.default_rng(0))
    turn_starts = [1, 12, 60, 90, 150]
    lines = [{"turn_idx": k, "token_idx": j, "frame": turn_starts[k] + j}
             for k, turn in enumerate(script.turns) for j, _ in enumerate(turn.words())]
    path = tmp_path / "align.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in lines))
    al = load_alignment(path, script)
    assert [place_ret(al[k]) for k in script.rag_turn_indices()] == [11, 89]
    frames = render_frames(script, al, np.random.default_rng(0))
    assert find_ret(frames) == 11 and find_ret(frames, 12) == 89


def test_sampler_short_lead():
    rng = np.random.default_rng(0)
    assert all(0.0 <= sample_training_delay(1.5, rng) <= 1.5 for _ in range(5000))
    assert all(0.0 <= sample_training_delay(0.4, rng) <= 0.4 for _ in range(1000))


def test_sampler_forced_main_branch():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        d = sample_training_delay(4.0, rng, p=0.5)
        assert 1.0 < d < 3.0
    assert sample_training_delay(2.0, rng, p=0.5) == 1.0  # degenerate interval


def test_sampler_mixture_mass():
    rng = np.random.default_rng(123)
    x = np.array([sample_training_delay(4.0, rng) for _ in range(100_000)])
    assert abs(np.mean((x <= 1.0) | (x >= 3.0)) - 0.10) <= 0.01


def test_sampler_rejects_non_positive_lead():
    with pytest.raises(ValueError):
        draw_training_delay(0.0, np.random.default_rng(0))


def test_drop_greeting():
    s = rag_script(greeting=True)
    rng = np.random.default_rng(0)
    assert all(drop_greeting(s, 0.0, rng) is s for _ in range(20))
    assert all(not drop_greeting(s, 1.0, rng).has_greeting for _ in range(20))
    assert s.has_greeting  # input untouched
    removed = sum(not drop_greeting(s, 0.3, rng).has_greeting for _ in range(10_000))
    assert abs(removed / 10_000 - 0.3) <= 0.015


def test_drop_greeting_without_greeting_draws_nothing():
    s = rag_script(greeting=False)
    a, b = np.random.default_rng(1), np.random.default_rng(1)
    assert drop_greeting(s, 0.5, a) is s
    assert a.random() == b.random()


def sine(amplitude, sr=24_000, seconds=0.08, hz=500.0):
    t = np.arange(int(sr * seconds)) / sr
    return amplitude * np.sin(2 * np.pi * hz * t)


def test_gate_audio_closed_form():
    assert np.array_equal(gate_audio(np.zeros(1920), 24_000), np.zeros(1920))
    loud = sine(1.0)
    assert 20 * math.log10(1 / math.sqrt(2)) == pytest.approx(-3.0103, abs=1e-4)
    assert np.array_equal(gate_audio(loud, 24_000), loud)
    quiet = sine(3e-4)
    assert 20 * math.log10(3e-4 / math.sqrt(2)) == pytest.approx(-73.47, abs=0.01)
    assert np.array_equal(gate_audio(quiet, 24_000), np.zeros_like(quiet))


def test_gate_audio_per_window():
    x = np.concatenate([sine(1.0), sine(3e-4)])
    out = gate_audio(x, 24_000)
    assert np.array_equal(out[:1920], x[:1920]) and not out[1920:].any()


def test_alignment_rate():
    al = align_script(rag_script(lead_words=6))
    at = al[1]
    assert at.d_lead_s == pytest.approx(2.0)
    assert at.lead_frame == seconds_to_frames(at.start_s)
    with pytest.raises(ScriptError):
        from duplexrag.datasynth import AlignmentConfig
        align_script(rag_script(), cfg=AlignmentConfig(words_per_second=20.0))


def test_training_example_schedule_matches_oracle():
    script = rag_script(lead_words=7)  # 7 words at 3 words/s, about 2.33 s
    (ex,) = build_training_examples(script, 1, cfg=SynthConfig(p_drop=0.0))
    assert ex.i_ret == ex.lead_frame - 1
    assert ex.schedule.start == ex.i_ret + round(ex.d_prime_s * 12.5) + 1
    assert 0 <= ex.d_prime_s <= ex.d_lead_s


def test_short_lead_example():
    script = rag_script(lead_words=1)  # a third of a second
    for seed in range(50):
        (ex,) = build_training_examples(script, seed)
        assert 0 <= ex.d_prime_s <= ex.d_lead_s < 2


def test_no_rag_turns_means_no_examples():
    script = plain_script()
    assert build_training_examples(script, 0) == []
    al = align_script(script)
    frames = render_frames(script, al, np.random.default_rng(0))
    assert all(f.model_text != RET for f in frames)


def test_fixture_dataset_records_validate(scripts):
    for script in scripts.values():
        for seed in range(20):
            for ex in build_training_examples(script, seed):
                rec = ex.to_record()
                assert validate_dataset_record(rec) == []
                assert set(rec) >= {"script_id", "turn_idx", "i_ret", "d_lead_s", "d_prime_s", "dropout",
                                    "ref_len_tokens", "schedule"}
                assert set(rec["schedule"]) == {"start", "len"}


def test_examples_independent_of_script_order(scripts):
    ids = sorted(scripts)
    a = {i: [e.to_record() for e in build_training_examples(scripts[i], 7)] for i in ids}
    b = {i: [e.to_record() for e in build_training_examples(scripts[i], 7)] for i in reversed(ids)}
    assert a == b


def test_ret_in_rendered_frames(scripts):
    for script in scripts.values():
        al = align_script(script)
        frames = render_frames(script, al, rng_for(0, script.script_id, "audio"))
        rets = [f.frame for f in frames if f.model_text == RET]
        assert rets == [al[k].lead_frame - 1 for k in script.rag_turn_indices()]


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d.update(variant="v9"), "variant"),
    (lambda d: d["turns"][0].update(speaker="narrator"), "speaker"),
    (lambda d: d["turns"][1].update(lead=""), "lead"),
    (lambda d: d.update(extra=1), "unknown"),
    (lambda d: d["turns"][1].update(colour="red"), "unknown"),
])
def test_script_validation(mutate, msg):
    d = rag_script().to_dict()
    d = copy.deepcopy(d)
    mutate(d)
    with pytest.raises(ScriptError, match=msg):
        ConversationScript.from_dict(d)


def test_script_round_trip(scripts):
    for s in scripts.values():
        assert ConversationScript.from_dict(json.loads(json.dumps(s.to_dict()))).to_dict() == s.to_dict()
