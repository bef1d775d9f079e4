import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spkver import nets
from spkver import trainer as tr
from spkver.errors import ConfigError, MappingError, NonFiniteError
from spkver.gradcore import Tensor
from spkver.loss import CMSoftmaxHead, MarginSchedule


def tiny_model(seed=0, dtype="float64", kind="resnet"):
    if kind == "resnet":
        cfg = {"base_channels": 2, "block_counts": (1, 1, 1, 1), "embedding_dim": 8, "feat_dim": 16, "stem_stride": 2}
    else:
        cfg = {"base_channels": 2, "stage_depths": (1, 2, 1, 1, 1), "embedding_dim": 8, "feat_dim": 16}
    return nets.build_model(kind, cfg, seed=seed, dtype=dtype)


def cluster_corpus(n_spk=4, utts=6, T=60, D=16, seed=0):
    """Gaussian blobs with a per-speaker spectral offset; trivially separable."""
    rng = np.random.default_rng(seed)
    feats, labels, train, valid = {}, {}, [], []
    centers = rng.normal(0, 2.0, (n_spk, D))
    for k in range(n_spk):
        for u in range(utts):
            uid = f"s{k}-{u}"
            feats[uid] = centers[k] + rng.normal(0, 0.5, (T + int(rng.integers(0, 20)), D))
            labels[uid] = k
            (valid if u == 0 else train).append(uid)
    return tr.TrainCorpus(feats, labels, [f"s{k}" for k in range(n_spk)], train, valid)


# -- optimiser and plateau rule ----------------------------------------------------------


def test_sgd_momentum_update_by_hand():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    opt = tr.OptimizerState(lr=0.1, momentum=0.9)
    tr.sgd_step(p, {"w": np.array([0.5, 1.0])}, opt)
    np.testing.assert_allclose(p["w"].data, [1.0 - 0.05, -2.0 - 0.1])
    tr.sgd_step(p, {"w": np.array([0.5, 1.0])}, opt)
    # v = 0.9 * [0.5, 1] + [0.5, 1] = [0.95, 1.9]
    np.testing.assert_allclose(p["w"].data, [0.95 - 0.095, -2.1 - 0.19])


def test_plateau_trace_halves_on_fourth_validation():
    sched = tr.PlateauScheduler(lr=0.1, patience=2)
    lrs = [tr.plateau_update(sched, v) for v in [1.0, 1.0, 1.0, 1.0]]
    assert lrs == [0.1, 0.1, 0.1, 0.05]


def test_plateau_improvement_resets_patience_and_threshold_matters():
    sched = tr.PlateauScheduler(lr=1.0, patience=1)
    trace = [5.0, 4.0, 4.0, 3.99995, 4.0]
    # 3.99995 is not better than 4.0 - 1e-4, so it counts as a bad epoch
    lrs = [tr.plateau_update(sched, v) for v in trace]
    assert lrs == [1.0, 1.0, 1.0, 0.5, 0.5]


def test_plateau_floor_and_exhaustion():
    sched = tr.PlateauScheduler(lr=4e-6, patience=0, min_lr=1e-6)
    lrs = [tr.plateau_update(sched, 1.0)] + [tr.plateau_update(sched, 1.0) for _ in range(4)]
    assert lrs == [4e-6, 2e-6, 1e-6, 1e-6, 1e-6]
    assert sched.exhausted


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=40), st.integers(0, 4))
def test_plateau_lr_never_increases_nor_drops_below_floor(trace, patience):
    sched = tr.PlateauScheduler(lr=0.05, patience=patience, min_lr=1e-3)
    lrs = [tr.plateau_update(sched, v) for v in trace]
    assert all(b <= a for a, b in zip([0.05] + lrs, lrs))
    assert all(lr >= 1e-3 for lr in lrs)


def test_full_scale_presets():
    s1, s2 = tr.full_stage1(), tr.full_stage2()
    assert (s1.batch_size, s1.chunk_frames, s1.validate_every, s1.patience, s1.factor, s1.min_lr) == (
        320, 400, 8000, 2, 0.5, 1e-6,
    )
    assert (s1.m1.start_value, s1.m1.end_value, s1.m2.end_value) == (0.0, 0.2, 0.1)
    assert (s2.batch_size, s2.chunk_frames, s2.validate_every) == (160, 1000, 2000)
    assert s2.m1 == MarginSchedule("exponential", 0.2, 0.8, 4000)
    assert s2.m2.start_value == 0.0 and s1.momentum == s2.momentum == 0.9


# -- data --------------------------------------------------------------------------------


def test_sample_chunk_slices_and_wraps():
    rng = np.random.default_rng(0)
    utt = np.arange(10.0)[:, None]
    np.testing.assert_array_equal(tr.sample_chunk(utt, 10, rng), utt)
    short = tr.sample_chunk(utt[:3], 7, rng)
    np.testing.assert_array_equal(short[:, 0], [0, 1, 2, 0, 1, 2, 0])
    chunk = tr.sample_chunk(utt, 4, rng)[:, 0]
    assert np.all(np.diff(chunk) == 1) and chunk[0] + 3 <= 9
    with pytest.raises(tr.SkipUtterance):
        tr.sample_chunk(utt[:0], 4, rng)


def test_batches_are_seeded_and_prefetch_is_order_preserving():
    corpus = cluster_corpus()
    cfg = tr.StageConfig(batch_size=5, chunk_frames=20, max_iters=6)
    serial = list(tr.BatchLoader(corpus, cfg, np.float64))
    threaded = list(tr.BatchLoader(corpus, tr.StageConfig(batch_size=5, chunk_frames=20, max_iters=6, workers=3), np.float64))
    assert len(serial) == len(threaded) == 6
    for (xa, ya), (xb, yb) in zip(serial, threaded):
        assert xa.tobytes() == xb.tobytes() and np.array_equal(ya, yb)
    assert xa.shape == (5, 20, 16)


def test_empty_corpus_is_a_config_error():
    with pytest.raises(ConfigError):
        tr.TrainCorpus({}, {}, [], [], [])


# -- transplant ------------------------------------------------------------------------------


def test_transplant_rows_are_bit_equal():
    base = CMSoftmaxHead.init(12, 8, seed=4)
    mapping = [7, 2, 11, 0]
    new = tr.transplant_classifier(base, mapping)
    assert new.num_classes == 4
    for i, j in enumerate(mapping):
        assert new.W.data[i].tobytes() == base.W.data[j].tobytes()
    # the new head owns its rows
    new.W.data[0] += 1.0
    assert base.W.data[7].tobytes() != new.W.data[0].tobytes()


def test_transplant_rejects_unknown_speakers():
    with pytest.raises(MappingError):
        tr.transplant_classifier(CMSoftmaxHead.init(3, 4), [0, 3])
    with pytest.raises(MappingError):
        tr.speaker_mapping(["a", "b"], ["b", "c"])
    assert tr.speaker_mapping(["a", "b", "c"], ["c", "a"]) == [2, 0]


def test_refine_init_keeps_backbone_and_selected_rows(tmp_path):
    model = tiny_model(seed=1)
    head = CMSoftmaxHead.init(5, 8, seed=2)
    tr.save_checkpoint(tmp_path / "base.ckpt", model, head, {"speakers": ["a", "b", "c", "d", "e"]})
    new_model, new_head = tr.refine_init(tmp_path / "base.ckpt", ["d", "b"])
    for (k, v), (k2, v2) in zip(model.state_dict().items(), new_model.state_dict().items()):
        assert k == k2 and v.tobytes() == v2.tobytes()
    assert new_head.W.data[0].tobytes() == head.W.data[3].tobytes()
    assert new_head.W.data[1].tobytes() == head.W.data[1].tobytes()


# -- checkpoints ----------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["resnet", "repvgg"])
def test_checkpoint_round_trip(tmp_path, kind):
    model, head = tiny_model(kind=kind), CMSoftmaxHead.init(3, 8, seed=1, s=20.0, m1=0.1)
    opt = tr.OptimizerState(lr=0.01, velocity={"classifier.weight": np.ones((3, 8))})
    tr.save_checkpoint(tmp_path / "m.ckpt", model, head, {"iteration": 5}, opt)
    m2, h2, meta, o2 = tr.load_checkpoint(tmp_path / "m.ckpt")
    assert meta["iteration"] == 5 and meta["architecture"]["kind"] == kind
    assert h2.s == 20.0 and h2.m1 == 0.1 and np.array_equal(h2.W.data, head.W.data)
    assert o2.lr == 0.01 and np.array_equal(o2.velocity["classifier.weight"], np.ones((3, 8)))
    x = np.random.default_rng(0).standard_normal((2, 40, 16))
    assert np.array_equal(model.eval()(x).data, m2.eval()(x).data)


def test_fused_checkpoint_round_trip(tmp_path):
    model = tiny_model(kind="repvgg").eval()
    nets.reparameterize(model)
    tr.save_checkpoint(tmp_path / "f.ckpt", model, None, {})
    back, head, _, _ = tr.load_checkpoint(tmp_path / "f.ckpt")
    assert back.fused and head is None
    x = np.random.default_rng(1).standard_normal((1, 48, 16))
    assert np.array_equal(model(x).data, back.eval()(x).data)


# -- the loop ---------------------------------------------------------------------------------


def test_run_stage_learns_separable_clusters(tmp_path):
    corpus = cluster_corpus()
    model = tiny_model(seed=3)
    head = CMSoftmaxHead.init(4, 8, seed=3, s=16.0)
    cfg = tr.StageConfig(
        batch_size=8, chunk_frames=32, max_iters=60, lr=0.05, validate_every=20, log_every=5,
        m1=MarginSchedule("linear", 0.0, 0.1, 30), m2=MarginSchedule.constant(0.0),
    )
    res = tr.run_stage(cfg, corpus, model, head, tmp_path / "ckpt", tmp_path / "train.log")
    recs = tr.parse_log((tmp_path / "train.log").read_text().splitlines())
    train = [r for r in recs if "loss" in r]
    val = [r for r in recs if "val_loss" in r]
    assert [r["iter"] for r in val] == [20, 40, 60]
    assert train[-1]["m1"] == pytest.approx(0.1) and train[0]["m1"] == 0.0
    assert val[-1]["val_loss"] < val[0]["val_loss"]
    assert np.mean([r["loss"] for r in train[-3:]]) < np.mean([r["loss"] for r in train[:3]])
    for it in (20, 40, 60):
        assert (tmp_path / "ckpt" / f"stage1_iter{it}.ckpt").exists()
    assert res.best_checkpoint == tmp_path / "ckpt" / "stage1_best.ckpt"
    _, _, meta, _ = tr.load_checkpoint(res.best_checkpoint)
    assert meta["best_val"] == min(r["val_loss"] for r in val)
    assert res.iterations == 60


def test_run_stage_is_reproducible():
    def once():
        corpus = cluster_corpus(seed=5)
        model, head = tiny_model(seed=6), CMSoftmaxHead.init(4, 8, seed=6)
        cfg = tr.StageConfig(batch_size=4, chunk_frames=24, max_iters=5, validate_every=100)
        return tr.run_stage(cfg, corpus, model, head)

    a, b = once(), once()
    assert a.history == b.history
    assert a.head.W.data.tobytes() == b.head.W.data.tobytes()


def test_zero_iterations_still_checkpoints(tmp_path):
    corpus = cluster_corpus()
    res = tr.run_stage(tr.StageConfig(max_iters=0), corpus, tiny_model(), CMSoftmaxHead.init(4, 8), tmp_path)
    assert res.last_checkpoint.exists() and res.best_checkpoint == res.last_checkpoint


def test_non_finite_batch_reports_iteration():
    corpus = cluster_corpus()
    corpus.feats = {k: np.full_like(v, np.nan) for k, v in corpus.feats.items()}
    with pytest.raises(NonFiniteError, match="iter 0"):
        tr.run_stage(tr.StageConfig(batch_size=2, chunk_frames=16, max_iters=3), corpus, tiny_model(), CMSoftmaxHead.init(4, 8))


def test_stage_config_validation():
    with pytest.raises(ConfigError):
        tr.StageConfig(stage=3).validate()
    with pytest.raises(ConfigError):
        tr.StageConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        tr.PlateauScheduler(factor=1.5)


def test_log_lines_round_trip_exactly():
    line = tr.format_log(iter=12, loss=math.pi, lr=1e-6, m1=0.2, m2=0.0)
    assert tr.parse_log([line]) == [{"iter": 12, "loss": math.pi, "lr": 1e-6, "m1": 0.2, "m2": 0.0}]


def test_sgd_small_examples():
    p = {"w": Tensor(np.array([0.3, -0.7]))}
    opt = tr.OptimizerState(lr=0.1)
    tr.sgd_step(p, {"w": np.zeros(2)}, opt)
    np.testing.assert_array_equal(p["w"].data, [0.3, -0.7])
    q = {"w": Tensor(np.array([1.0]))}
    opt = tr.OptimizerState(lr=0.1)
    tr.sgd_step(q, {"w": np.ones(1)}, opt)
    assert q["w"].data[0] == pytest.approx(0.9, abs=1e-15)
    tr.sgd_step(q, {"w": np.ones(1)}, opt)
    assert 1.0 - q["w"].data[0] == pytest.approx(0.29, abs=1e-15)


def test_strictly_decreasing_losses_keep_lr():
    sched = tr.PlateauScheduler(lr=0.05, patience=0)
    assert {tr.plateau_update(sched, v) for v in np.linspace(5, 1, 30)} == {0.05}


def test_transplanted_head_reproduces_base_logits():
    from spkver.loss import cosine_logits

    base = CMSoftmaxHead.init(10, 8, seed=9)
    mapping = [7, 2, 9]
    sub = tr.transplant_classifier(base, mapping)
    f = Tensor(np.random.default_rng(3).standard_normal((4, 8)))
    np.testing.assert_array_equal(cosine_logits(f, sub).data, cosine_logits(f, base).data[:, mapping])
    ident = tr.transplant_classifier(base, range(10))
    assert ident.W.data.tobytes() == base.W.data.tobytes()


def test_zero_iterations_leave_model_unchanged():
    model, head = tiny_model(seed=2), CMSoftmaxHead.init(4, 8, seed=2)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    w = head.W.data.copy()
    tr.run_stage(tr.StageConfig(max_iters=0), cluster_corpus(), model, head)
    for k, v in model.state_dict().items():
        assert v.tobytes() == before[k].tobytes()
    assert head.W.data.tobytes() == w.tobytes()


def test_checkpoints_are_bit_identical_across_runs(tmp_path):
    from spkver.gradcore import load_container

    paths = []
    for run, workers in (("a", 0), ("b", 0), ("c", 2)):
        cfg = tr.StageConfig(batch_size=4, chunk_frames=24, max_iters=6, validate_every=3, workers=workers)
        tr.run_stage(cfg, cluster_corpus(seed=1), tiny_model(seed=1), CMSoftmaxHead.init(4, 8, seed=1), tmp_path / run)
        paths.append(tmp_path / run / "stage1_iter6.ckpt")
    assert paths[0].read_bytes() == paths[1].read_bytes()
    # prefetching workers change nothing but the recorded worker count
    a, _ = load_container(paths[0])
    c, _ = load_container(paths[2])
    assert a.keys() == c.keys() and all(a[k].tobytes() == c[k].tobytes() for k in a)


def test_logged_margins_and_lr_follow_their_rules(tmp_path):
    m1 = MarginSchedule("exponential", 0.2, 0.8, 7)
    m2 = MarginSchedule("linear", 0.0, 0.1, 5)
    cfg = tr.StageConfig(batch_size=4, chunk_frames=24, max_iters=12, validate_every=2, patience=0, lr=0.5, log_every=1, m1=m1, m2=m2)
    tr.run_stage(cfg, cluster_corpus(), tiny_model(), CMSoftmaxHead.init(4, 8), log_path=tmp_path / "log")
    recs = tr.parse_log((tmp_path / "log").read_text().splitlines())
    from spkver.loss import margin_at

    train = [r for r in recs if "loss" in r]
    assert len(train) == 12
    for r in train:
        assert r["m1"] == margin_at(m1, r["iter"]) and r["m2"] == margin_at(m2, r["iter"])
    lrs = [r["lr"] for r in recs if "lr" in r]
    assert all(b <= a for a, b in zip(lrs, lrs[1:])) and min(lrs) >= 1e-6
