import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spkver import corpus as C
from spkver.errors import ConfigError, SplitError


def manifest(n_spk=5, utts=10):
    return C.Manifest(
        [C.ManifestEntry(f"s{k}-{u}", f"/x/s{k}-{u}.wav", f"s{k}", "train") for k in range(n_spk) for u in range(utts)]
    )


def test_generation_is_deterministic_and_counts_match(tmp_path):
    a = C.generate_synthetic_corpus(tmp_path / "a", 20, 10, 0.3, seed=7)
    b = C.generate_synthetic_corpus(tmp_path / "b", 20, 10, 0.3, seed=7)
    assert len(a) == 200 and len({e.utt_id for e in a}) == 200
    assert len(a.speakers()) == 20
    for ea, eb in zip(a, b):
        assert open(ea.path, "rb").read() == open(eb.path, "rb").read()


def test_speaker_resonances_lie_in_band():
    for k in range(50):
        spk = C.SyntheticSpeakerSpec.draw(3, k)
        assert 3 <= len(spk.formants) <= 5
        assert all(100.0 <= f <= 3700.0 for f in spk.formants)
        assert spk == C.SyntheticSpeakerSpec.draw(3, k)


def test_domains_share_speakers_but_not_waveforms(tmp_path):
    a = C.generate_synthetic_corpus(tmp_path, 2, 1, 0.5, seed=1, domain="a")
    b = C.generate_synthetic_corpus(tmp_path, 2, 1, 0.5, seed=1, domain="b")
    assert a.speakers() == b.speakers()
    assert open(a.entries[0].path, "rb").read() != open(b.entries[0].path, "rb").read()


def test_invalid_generation_counts():
    with pytest.raises(ConfigError):
        C.generate_synthetic_corpus("/tmp/unused", 1, 10, 1.0, seed=0)
    with pytest.raises(ConfigError):
        C.generate_synthetic_corpus("/tmp/unused", 4, 0, 1.0, seed=0)


def test_manifest_round_trip_and_uniqueness(tmp_path):
    m = manifest()
    m.save(tmp_path / "m.tsv")
    assert C.Manifest.load(tmp_path / "m.tsv").entries == m.entries
    with pytest.raises(ConfigError):
        C.Manifest([C.ManifestEntry("u", "p", "s"), C.ManifestEntry("u", "q", "s")])
    (tmp_path / "bad.tsv").write_text("u\tp\ts\n")
    with pytest.raises(ConfigError, match="bad.tsv:1"):
        C.Manifest.load(tmp_path / "bad.tsv")


def test_split_holds_out_one_per_speaker():
    train, valid = C.split_manifest(manifest(), 0.1, seed=3)
    assert len(valid) == 5 and len(train) == 45
    assert sorted(len(v) for v in valid.by_speaker().values()) == [1] * 5
    assert all(e.subset == "valid" for e in valid)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 0.6), st.integers(0, 2**31 - 1), st.integers(2, 12))
def test_split_is_a_seeded_partition(frac, seed, utts):
    m = manifest(4, utts)
    try:
        train, valid = C.split_manifest(m, frac, seed)
    except SplitError:
        assert round(frac * utts) >= utts
        return
    ids = [e.utt_id for e in train] + [e.utt_id for e in valid]
    assert sorted(ids) == sorted(e.utt_id for e in m) and len(set(ids)) == len(ids)
    assert set(train.speakers()) == set(m.speakers())
    again = C.split_manifest(m, frac, seed)
    assert again[1].entries == valid.entries


def test_split_errors():
    with pytest.raises(SplitError):
        C.split_manifest(manifest(), 0.0, 0)
    with pytest.raises(SplitError):
        C.split_manifest(manifest(utts=1), 0.6, 0)


def test_trials_counts_labels_and_uniqueness():
    m = manifest(6, 6)
    enroll = C.Manifest([e for e in m if int(e.utt_id.split("-")[1]) < 3])
    test = C.Manifest([e for e in m if int(e.utt_id.split("-")[1]) >= 3])
    spk = {e.utt_id: e.speaker_id for e in m}
    trials = C.make_trials(enroll, test, 40, 60, seed=1)
    assert sum(t.label == "target" for t in trials) == 40
    assert sum(t.label == "nontarget" for t in trials) == 60
    assert len({(t.enroll, t.test) for t in trials}) == 100
    assert all((spk[t.enroll] == spk[t.test]) == (t.label == "target") for t in trials)
    only = C.make_trials(enroll, test, 10, 0, seed=2)
    assert all(t.label == "target" for t in only)
    assert C.make_trials(enroll, test, 40, 60, seed=1) == trials
    with pytest.raises(ConfigError):
        C.make_trials(enroll, test, 55, 0, seed=0)  # only 6 * 3 * 3 = 54 same-speaker pairs
