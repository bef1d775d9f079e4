"""Command-line entry point.

Workdir layout::

    manifests/  corpus manifests, trial lists, augmentation list
    feats/      cached feature dumps (optional)
    ckpt/       checkpoints (stage1_best.ckpt is the refinement starting point)
    emb/        embedding containers
    scores/     score files
    reports/    training logs, calibration parameters, evaluation reports

Exit codes: 0 success, 1 runtime or config failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import augment as aug
from . import backend, corpus, frontend, scoring, trainer
from .config import RunConfig, dump_config, load_config
from .errors import ConfigError, EmptyFeaturesError, SpkError
from .loss import CMSoftmaxHead, MarginSchedule
from .nets import build_model, reparameterize

log = logging.getLogger("spkver")

LAYOUT = ("manifests", "feats", "ckpt", "emb", "scores", "reports")


def workdir(cfg: RunConfig) -> Path:
    root = Path(cfg.paths.workdir)
    for sub in LAYOUT:
        (root / sub).mkdir(parents=True, exist_ok=True)
    return root


def frontend_cfg(cfg: RunConfig):
    f = asdict(cfg.frontend)
    cmn, cache = f.pop("cmn_window"), f.pop("cache")
    return frontend.FrontendConfig(**f), frontend.VadConfig(**asdict(cfg.vad)), cmn, cache


def load_features(manifest: corpus.Manifest, cfg: RunConfig, root: Path) -> dict:
    fcfg, vcfg, cmn, cache = frontend_cfg(cfg)
    feats = {}
    for e in manifest:
        dump = root / "feats" / f"{e.utt_id}.feat"
        if cache and dump.exists():
            feats[e.utt_id] = frontend.read_feats(dump)
            continue
        try:
            x = frontend.extract_features(frontend.read_wav(e.path), fcfg, vcfg, cmn)
        except EmptyFeaturesError:
            log.warning("skipping %s: no voiced frames", e.utt_id)
            continue
        if cache:
            frontend.write_feats(dump, x)
        feats[e.utt_id] = x
    return feats


def stage_config(cfg: RunConfig, stage: int) -> trainer.StageConfig:
    sec = cfg.stage1 if stage == 1 else cfg.stage2
    if sec.preset:
        return replace(trainer.PRESETS[sec.preset](), seed=cfg.seed, workers=cfg.workers, s=cfg.s)
    d = asdict(sec)
    d.pop("preset")
    d["m1"] = MarginSchedule(**d["m1"])
    d["m2"] = MarginSchedule(**d["m2"])
    return trainer.StageConfig(stage=stage, seed=cfg.seed, workers=cfg.workers, s=cfg.s, **d)


def _manifest(root, name) -> corpus.Manifest:
    path = root / "manifests" / name
    if not path.exists():
        raise ConfigError(f"missing manifest {path} (run `synth` first)")
    return corpus.Manifest.load(path)


# -- subcommands ------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args, root: Path):
    s = cfg.synth
    if s.indomain_speakers > s.n_speakers:
        raise ConfigError("synth.indomain_speakers exceeds synth.n_speakers")
    out = root / "corpus"
    a = corpus.generate_synthetic_corpus(out, s.n_speakers, s.utts_per_speaker, s.duration_s, cfg.seed, "a", tag="at")
    inspk = list(range(s.indomain_speakers))
    b = corpus.generate_synthetic_corpus(out, 0, s.indomain_utts, s.duration_s, cfg.seed, "b", speakers=inspk, tag="bt")
    a_tr, a_va = corpus.split_manifest(a, s.valid_fraction, cfg.seed)
    b_tr, b_va = corpus.split_manifest(b, s.valid_fraction, cfg.seed + 1)
    refine = b_tr + b_va
    (a_tr + a_va + refine).save(root / "manifests" / "pretrain.tsv")
    refine.save(root / "manifests" / "refine.tsv")
    for name, n_en, n_te, n_tar, n_non in (
        ("eval", s.eval_enroll_utts, s.eval_test_utts, s.n_target, s.n_nontarget),
        ("dev", s.dev_enroll_utts, s.dev_test_utts, s.n_dev_target, s.n_dev_nontarget),
    ):
        en = corpus.generate_synthetic_corpus(out, 0, n_en, s.duration_s, cfg.seed, "b", "enroll", inspk, f"b{name}e")
        te = corpus.generate_synthetic_corpus(out, 0, n_te, s.duration_s, cfg.seed, "b", "test", inspk, f"b{name}t")
        (en + te).save(root / "manifests" / f"{name}.tsv")
        trials = corpus.make_trials(en, te, n_tar, n_non, cfg.seed)
        scoring.write_trials(root / "manifests" / f"{name}_trials.txt", trials)
    print(f"synthesized {len(a) + len(b)} training utterances into {out}")


def _load_sources(directory) -> list:
    if not directory:
        return []
    return [frontend.read_wav(p) for p in sorted(Path(directory).glob("*.wav"))]


def cmd_augment(cfg: RunConfig, args, root: Path):
    m = _manifest(root, "pretrain.tsv")
    train = [e for e in m if e.subset == "train" and "-aug" not in e.utt_id]
    if cfg.augment.copies < 1:
        print("augment.copies is 0; nothing to do")
        return
    speech = [frontend.read_wav(e.path) for e in train[:: max(1, len(train) // 50)]]
    sources = aug.AugmentSources(
        rirs=_load_sources(cfg.augment.rir_dir),
        music=_load_sources(cfg.augment.music_dir) or [aug.synthetic_music(10.0, cfg.seed + i) for i in range(5)],
        noise=_load_sources(cfg.augment.noise_dir) or [aug.synthetic_noise(10.0, cfg.seed + i) for i in range(5)],
        speech=speech,
    )
    out = root / "corpus" / "aug"
    out.mkdir(parents=True, exist_ok=True)
    existing = {e.utt_id for e in m}
    new_entries, lines = [], []
    rng = np.random.default_rng(cfg.seed)
    for e in train:
        wave = frontend.read_wav(e.path)
        for c in range(cfg.augment.copies):
            kind = cfg.augment.kinds[int(rng.integers(len(cfg.augment.kinds)))]
            seed = int(rng.integers(2**31))
            utt_id = f"{e.utt_id}-aug{c}-{kind}"
            if utt_id in existing:
                continue
            path = out / f"{utt_id}.wav"
            frontend.write_wav(path, aug.augment(wave, aug.AugmentSpec(kind, rng_seed=seed), sources))
            new_entries.append(corpus.ManifestEntry(utt_id, str(path), e.speaker_id, "train"))
            lines.append(aug.format_manifest_line(utt_id, kind, seed))
    (m + corpus.Manifest(new_entries)).save(root / "manifests" / "pretrain.tsv")
    with open(root / "manifests" / "augment.lst", "a") as fh:
        fh.writelines(line + "\n" for line in lines)
    print(f"wrote {len(new_entries)} augmented utterances")


def _train_corpus(m: corpus.Manifest, feats: dict, speakers: list) -> trainer.TrainCorpus:
    label = {s: i for i, s in enumerate(speakers)}
    entries = [e for e in m if e.utt_id in feats]
    return trainer.TrainCorpus(
        feats={e.utt_id: feats[e.utt_id] for e in entries},
        labels={e.utt_id: label[e.speaker_id] for e in entries},
        speakers=speakers,
        train_ids=[e.utt_id for e in entries if e.subset == "train"],
        valid_ids=[e.utt_id for e in entries if e.subset == "valid"],
    )


def cmd_train(cfg: RunConfig, args, root: Path):
    stage = args.stage
    scfg = stage_config(cfg, stage)
    if stage == 2:
        init = Path(args.init) if args.init else root / "ckpt" / "stage1_best.ckpt"
        if not init.exists():
            raise ConfigError(f"stage 2 needs a stage-1 checkpoint; missing {init}")
        m = _manifest(root, "refine.tsv")
    else:
        m = _manifest(root, "pretrain.tsv")
    feats = load_features(m, cfg, root)
    speakers = m.speakers()
    data = _train_corpus(m, feats, speakers)
    if stage == 1:
        mc = cfg.model
        arch = asdict(mc.resnet if mc.kind == "resnet" else mc.repvgg)
        arch["feat_dim"] = cfg.frontend.num_mel_bins
        model = build_model(mc.kind, arch, cfg.seed, mc.dtype)
        head = CMSoftmaxHead.init(len(speakers), model.embedding_dim, cfg.seed, model.dtype, s=cfg.s)
    else:
        model, head = trainer.refine_init(init, speakers)
        head.s = cfg.s
    log_path = root / "reports" / f"train_stage{stage}.log"
    result = trainer.run_stage(scfg, data, model, head, root / "ckpt", log_path, {"seed": cfg.seed})
    print(f"stage {stage}: {result.iterations} iterations, best checkpoint {result.best_checkpoint}")


def cmd_reparam(cfg: RunConfig, args, root: Path):
    path = Path(args.checkpoint)
    model, head, meta, opt = trainer.load_checkpoint(path)
    model.eval()
    reparameterize(model)
    trainer.save_checkpoint(path, model, head, {k: v for k, v in meta.items() if k != "architecture"}, opt)
    print(f"fused {path}: {model.num_parameters()} parameters")


def _default_ckpt(root: Path) -> Path:
    for name in ("stage2_best.ckpt", "stage1_best.ckpt"):
        if (root / "ckpt" / name).exists():
            return root / "ckpt" / name
    raise ConfigError(f"no checkpoint found in {root / 'ckpt'}")


def cmd_extract(cfg: RunConfig, args, root: Path):
    ckpt = Path(args.checkpoint) if args.checkpoint else _default_ckpt(root)
    model, _, _, _ = trainer.load_checkpoint(ckpt)
    model.eval()
    m = _manifest(root, f"{args.split}.tsv")
    feats = load_features(m, cfg, root)
    store = {}
    for e in m:
        if e.utt_id not in feats or len(feats[e.utt_id]) < model.min_frames:
            log.warning("no embedding for %s", e.utt_id)
            continue
        store[e.utt_id] = scoring.embed_features(model, feats[e.utt_id], e.utt_id)
    out = Path(args.out) if args.out else root / "emb" / f"{args.split}.emb"
    scoring.save_embeddings(out, store)
    print(f"wrote {len(store)} embeddings to {out}")


def cmd_score(cfg: RunConfig, args, root: Path):
    trials_path = Path(args.trials) if args.trials else root / "manifests" / f"{args.split}_trials.txt"
    emb_path = Path(args.embeddings) if args.embeddings else root / "emb" / f"{args.split}.emb"
    scores = scoring.score_trials(scoring.read_trials(trials_path), scoring.load_embeddings(emb_path))
    out = Path(args.out) if args.out else root / "scores" / f"{args.split}.txt"
    scoring.write_scores(out, scores)
    print(f"wrote {len(scores.trials)} scores to {out}")


def cmd_calibrate(cfg: RunConfig, args, root: Path):
    dev = scoring.read_scores(args.dev_scores, scoring.read_trials(args.dev_trials))
    model = backend.calibrate_fit(dev, prior=cfg.calibration.prior)
    params = {"a": model.a, "b": model.b, "prior": model.prior, "iterations": model.iterations, "grad_norm": model.grad_norm}
    (root / "reports" / "calibration.json").write_text(json.dumps(params, indent=2) + "\n")
    for path in args.scores:
        ss = model.apply(scoring.read_scores(path))
        out = Path(path).with_suffix(".cal.txt")
        scoring.write_scores(out, ss)
        print(f"calibrated {path} -> {out}")
    print(f"a={model.a:.6f} b={model.b:.6f}")


def cmd_fuse(cfg: RunConfig, args, root: Path):
    fused = backend.fuse([scoring.read_scores(p) for p in args.scores])
    scoring.write_scores(args.out, fused)
    print(f"fused {len(args.scores)} systems into {args.out}")


def cmd_evaluate(cfg: RunConfig, args, root: Path):
    trials = scoring.read_trials(args.trials)
    params = backend.DcfParams(tuple(cfg.dcf.p_targets), cfg.dcf.c_miss, cfg.dcf.c_fa)
    results = {}
    for path in args.scores:
        ss = scoring.read_scores(path, trials)
        if ss.labels is None:
            raise ConfigError(f"{args.trials} does not label every trial in {path}")
        results[Path(path).name] = backend.evaluate(ss, params)
    report = backend.format_report(results)
    (root / "reports" / "evaluation.txt").write_text(report)
    print(report, end="")


COMMANDS = {
    "synth": cmd_synth,
    "augment": cmd_augment,
    "train": cmd_train,
    "reparam": cmd_reparam,
    "extract": cmd_extract,
    "score": cmd_score,
    "calibrate": cmd_calibrate,
    "fuse": cmd_fuse,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--workdir", help="override paths.workdir")
    common.add_argument("--workers", type=int, help="data-loading worker threads")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="spkver", description="Speaker-verification toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic corpus, manifests and trials")
    sub.add_parser("augment", parents=[common], help="add augmented copies of the pre-training utterances")
    t = sub.add_parser("train", parents=[common], help="run training stage 1 or 2")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--init", help="stage-1 checkpoint for stage 2 (default ckpt/stage1_best.ckpt)")
    r = sub.add_parser("reparam", parents=[common], help="fuse a RepVGG checkpoint in place")
    r.add_argument("--checkpoint", required=True)
    e = sub.add_parser("extract", parents=[common], help="extract embeddings for a manifest")
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="eval", help="manifest name under manifests/ (default eval)")
    e.add_argument("--out")
    s = sub.add_parser("score", parents=[common], help="cosine-score a trial list")
    s.add_argument("--split", default="eval")
    s.add_argument("--trials")
    s.add_argument("--embeddings")
    s.add_argument("--out")
    c = sub.add_parser("calibrate", parents=[common], help="fit logistic calibration on dev scores and apply it")
    c.add_argument("--dev-scores", required=True)
    c.add_argument("--dev-trials", required=True)
    c.add_argument("--scores", nargs="+", default=[])
    f = sub.add_parser("fuse", parents=[common], help="equal-weight score fusion")
    f.add_argument("--scores", nargs="+", required=True)
    f.add_argument("--out", required=True)
    v = sub.add_parser("evaluate", parents=[common], help="EER / minDCF / actDCF report")
    v.add_argument("--scores", nargs="+", required=True)
    v.add_argument("--trials", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.overrides)
    if args.workdir:
        overrides.append(f"paths.workdir={args.workdir}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    try:
        cfg = load_config(args.config, overrides)
        root = workdir(cfg)
        dump_config(cfg, root / "config.resolved.yaml")
        COMMANDS[args.command](cfg, args, root)
    except (SpkError, OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
