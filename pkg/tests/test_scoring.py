import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spkver import nets
from spkver import scoring as S
from spkver.corpus import SyntheticSpeakerSpec, synthesize_utterance
from spkver.errors import EmptyFeaturesError, MissingEmbeddingError, ShapeError, StateError
from spkver.frontend import Waveform, energy_vad


def E(v, uid=""):
    return S.Embedding(np.asarray(v, dtype=float), uid)


def toy_model():
    cfg = nets.ResNetConfig(base_channels=2, block_counts=(1, 1, 1, 1), embedding_dim=16, stem_stride=2)
    return nets.build_resnet(cfg, seed=0).eval()


def test_cosine_examples():
    a = E([0.3, -1.0, 2.0])
    assert S.cosine_score(a, a) == pytest.approx(1.0, abs=1e-15)
    assert S.cosine_score(E([1, 0]), E([0, 1])) == 0.0
    assert S.cosine_score(E([0.6, 0.8]), E([1, 0])) == pytest.approx(0.6, abs=1e-15)
    with pytest.raises(ShapeError):
        S.cosine_score(E([1, 0]), E([1, 0, 0]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 64))
def test_cosine_is_symmetric_and_bounded(seed, d):
    rng = np.random.default_rng(seed)
    a, b = E(rng.standard_normal(d)), E(rng.standard_normal(d))
    assert S.cosine_score(a, b) == S.cosine_score(b, a)
    assert -1.0 <= S.cosine_score(a, b) <= 1.0
    assert abs(np.linalg.norm(a.vector) - 1.0) <= 1e-6


def test_score_trials_examples():
    rng = np.random.default_rng(0)
    store = {u: E(rng.standard_normal(8), u) for u in "abc"}
    assert len(S.score_trials([], store).scores) == 0
    assert S.score_trials([S.Trial("a", "a")], store).scores[0] == pytest.approx(1.0)
    trials = [S.Trial("a", "b", "target"), S.Trial("b", "c", "nontarget"), S.Trial("c", "a", "target")]
    got = S.score_trials(trials, store)
    expected = [float(np.dot(store[t.enroll].vector, store[t.test].vector)) for t in trials]
    np.testing.assert_allclose(got.scores, expected, rtol=0, atol=1e-15)
    assert got.keys == [("a", "b"), ("b", "c"), ("c", "a")]
    np.testing.assert_array_equal(got.labels, [True, False, True])
    assert S.score_trials(trials, store).scores.tobytes() == got.scores.tobytes()
    with pytest.raises(MissingEmbeddingError, match="zz"):
        S.score_trials([S.Trial("a", "zz")], store)


def test_multi_utterance_enrollment_averages_then_normalises():
    store = {"u1": E([1.0, 0.0]), "u2": E([0.0, 1.0]), "t": E([1.0, 1.0])}
    got = S.score_trials([S.Trial("model", "t")], store, {"model": ["u1", "u2"]})
    assert got.scores[0] == pytest.approx(1.0)
    with pytest.raises(MissingEmbeddingError):
        S.score_trials([S.Trial("model", "t")], store, {"model": ["u1", "u3"]})


def test_extract_embedding_contract():
    model = toy_model()
    wave = synthesize_utterance(SyntheticSpeakerSpec.draw(0, 0), 2.0, seed=1)
    a = S.extract_embedding(model, wave, "u")
    b = S.extract_embedding(model, wave, "u")
    assert a.vector.tobytes() == b.vector.tobytes()
    assert abs(np.linalg.norm(a.vector) - 1.0) <= 1e-6 and a.vector.shape == (16,)
    with pytest.raises(EmptyFeaturesError):
        S.extract_embedding(model, Waveform(np.zeros(16000)))
    with pytest.raises(StateError):
        S.extract_embedding(model.train(), wave)


SILENCE_COS_TOL = 0.95  # measured 0.97-0.99 on 10 s utterances with the untrained toy model


def test_trailing_silence_barely_moves_the_embedding():
    # Floor-level silence lowers the mean-relative VAD threshold and enters the CMN windows of
    # the last frames, so equality only holds up to SILENCE_COS_TOL.
    model = toy_model()
    for k in range(3):
        wave = synthesize_utterance(SyntheticSpeakerSpec.draw(0, k), 10.0, seed=k)
        padded = Waveform(np.concatenate([wave.samples, np.zeros(4000)]))
        m0 = energy_vad(wave).voiced
        m1 = energy_vad(padded).voiced
        assert not m1[len(m0) + 2 :].any()  # the silence itself is never voiced
        assert np.all(m1[: len(m0)] >= m0)  # a lower threshold only admits more frames
        cos = S.cosine_score(S.extract_embedding(model, wave), S.extract_embedding(model, padded))
        assert cos >= SILENCE_COS_TOL


def test_files_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    store = {f"u{i}": E(rng.standard_normal(5), f"u{i}") for i in range(4)}
    S.save_embeddings(tmp_path / "e.bin", store)
    back = S.load_embeddings(tmp_path / "e.bin")
    assert list(back) == list(store)
    for k in store:  # loading re-normalises, which may move the last bit
        np.testing.assert_allclose(back[k].vector, store[k].vector, rtol=0, atol=1e-15)

    trials = [S.Trial("u0", "u1", "target"), S.Trial("u2", "u3", "nontarget")]
    S.write_trials(tmp_path / "trials", trials)
    assert S.read_trials(tmp_path / "trials") == trials
    scores = S.score_trials(trials, store)
    S.write_scores(tmp_path / "scores", scores)
    assert all(len(line.split()[2].split(".")[1]) == 6 for line in (tmp_path / "scores").read_text().splitlines())
    back = S.read_scores(tmp_path / "scores", trials)
    np.testing.assert_allclose(back.scores, scores.scores, atol=5e-7)
    np.testing.assert_array_equal(back.labels, [True, False])
    assert S.read_scores(tmp_path / "scores").labels is None


def test_trial_file_errors(tmp_path):
    (tmp_path / "dup").write_text("a b target\na b nontarget\n")
    with pytest.raises(ValueError, match="duplicate"):
        S.read_trials(tmp_path / "dup")
    (tmp_path / "bad").write_text("a b maybe\n")
    with pytest.raises(ValueError, match="bad:1"):
        S.read_trials(tmp_path / "bad")
    (tmp_path / "s").write_text("x y 0.5\n")
    with pytest.raises(MissingEmbeddingError):
        S.read_scores(tmp_path / "s", [S.Trial("a", "b", "target")])
