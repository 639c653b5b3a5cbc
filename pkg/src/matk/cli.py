"""Command-line entry point: ``matk <command> ...``.

Every command writes its fully resolved arguments beside its output as
``<out>.run.json``, outside output directories so those hold artifacts
only.  ``matk replay`` re-executes such a record.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig, attack_gallery
from .datakit import (ImageRecord, Jitter, SynthSpec, export_adversarial_gallery, load_dataset,
                      load_image_folder, save_dataset, synth_generate, write_png)
from .defense import DefensePlan, generate_adv_training_set, train_metric_preserving
from .embedder import (EmbedderConfig, TrainHyper, extract_features, init_model, load_checkpoint,
                       save_checkpoint, train)
from .evaluation import DEFAULT_KS, EvalReport, evaluate, map_ratio, ranking_list, render_strip
from .metrics import MetricSpec, load_mahalanobis, pairwise_distances

log = logging.getLogger("matk")

LOSSES = {"ce": "cross_entropy", "triplet": "triplet"}


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _write_run_config(path: Path, command: str, args: dict):
    doc = {"command": command, "version": __version__, "args": args}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _file_record(out: Path) -> Path:
    out = Path(out)
    return out.with_name(out.name.rstrip("/") + ".run.json")


def parse_metric(text: str) -> MetricSpec:
    if text == "euclidean":
        return MetricSpec()
    if text.startswith("mahalanobis:"):
        return load_mahalanobis(text.split(":", 1)[1])
    raise ValueError(f"metric must be 'euclidean' or 'mahalanobis:FILE', got {text!r}")


def class_labels(records) -> tuple[np.ndarray, list[int]]:
    """Map identities to contiguous class indices (sorted identity order)."""
    ids = sorted({r.identity for r in records})
    index = {ident: k for k, ident in enumerate(ids)}
    return np.array([index[r.identity] for r in records]), ids


# -- commands ----------------------------------------------------------------------

def cmd_synth(a) -> int:
    spec = SynthSpec(
        num_train_ids=a.num_train_ids, num_test_ids=a.num_test_ids,
        images_per_id_per_camera=a.images_per_id, num_cameras=a.num_cameras,
        image_size=tuple(a.image_size), seed=a.seed, contrast=a.contrast,
        jitter=Jitter(a.color_sigma, a.shift_max, a.noise_sigma),
    )
    out = Path(a.out)
    save_dataset(synth_generate(spec), out, {"synth_spec": spec.to_json()})
    _write_run_config(_file_record(out), "synth", vars_of(a))
    print(out)
    return 0


def _resolve_train_hyper(a, loss: str) -> TrainHyper:
    pk = tuple(a.pk)
    batch = a.batch_size if a.batch_size is not None else (pk[0] * pk[1] if loss == "triplet" else 32)
    a.batch_size = batch
    return TrainHyper(learning_rate=a.lr, epochs=a.epochs, batch_size=batch, margin=a.margin,
                      pk_batch=pk, seed=a.seed)


def cmd_train(a) -> int:
    ds = load_dataset(a.data)
    loss = LOSSES[a.loss]
    labels, ids = class_labels(ds.train)
    h, w, c = ds.train[0].pixels.shape
    config = EmbedderConfig((h, w, c), tuple(a.hidden), a.feature_dim,
                            len(ids) if loss == "cross_entropy" else 0)
    hyper = _resolve_train_hyper(a, loss)
    model = init_model(config, a.seed, loss)
    history: list[float] = []
    model = train(model, ds.train, labels, hyper, loss, history)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    out.with_name(out.name + ".losses.json").write_text(
        json.dumps({"loss": loss, "epoch_losses": history,
                    "final_loss": history[-1] if history else None}, indent=1) + "\n")
    _write_run_config(_file_record(out), "train", vars_of(a))
    print(out)
    return 0


def _attack_config(a, mode=None) -> AttackConfig:
    policy, target = "random_other", None
    if a.target is not None:
        policy, target = "fixed_identity", a.target
    cfg = AttackConfig(method=a.method, epsilon=a.eps, alpha=a.alpha, mu=a.mu,
                       iters=a.iters if a.iters == "auto" else int(a.iters),
                       mode=mode or ("targeted" if a.targeted else "non_targeted"),
                       target_policy=policy, target_identity=target, seed=a.seed)
    a.alpha, a.iters = cfg.alpha, cfg.iters
    return cfg


def cmd_attack(a) -> int:
    ds = load_dataset(a.data)
    models = [load_checkpoint(p) for p in a.models.split(",")]
    metric = parse_metric(a.metric)
    cfg = _attack_config(a)
    gallery = ds.split(a.split)
    examples = attack_gallery(models, metric, ds.probe, gallery, cfg)
    out = Path(a.out)
    export_adversarial_gallery(examples, out, cfg.to_json())
    _write_run_config(_file_record(out), "attack", vars_of(a))
    flagged = sum(ex.flagged for ex in examples)
    print(f"{out}: {len(examples)} images ({flagged} passed through), iters={cfg.iters}")
    return 0


def cmd_defend(a) -> int:
    ds = load_dataset(a.data)
    clean = load_checkpoint(a.model)
    if a.seed is None:
        a.seed = clean.seed + 1
    cfg = _attack_config(a, mode="non_targeted")
    hyper = _resolve_train_hyper(a, clean.training_loss_tag)
    labels, _ = class_labels(ds.train)
    plan = DefensePlan(clean, cfg, hyper, parse_metric(a.metric))
    adv = generate_adv_training_set(clean, ds.train, cfg, plan.metric)
    adv_dir = Path(a.adv_out)
    export_adversarial_gallery(adv, adv_dir, cfg.to_json())
    history: list[float] = []
    defended = train_metric_preserving(plan, ds.train, labels, adv, history)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(defended, out)
    out.with_name(out.name + ".losses.json").write_text(
        json.dumps({"loss": defended.training_loss_tag, "epoch_losses": history,
                    "final_loss": history[-1] if history else None}, indent=1) + "\n")
    _write_run_config(_file_record(out), "defend", vars_of(a))
    print(out)
    return 0


def _eval_sets(a):
    data = Path(a.data) if a.data else None
    probe = load_image_folder(a.probe or data / "probe", a.naming, "probe")
    gallery = load_image_folder(a.gallery or data / "gallery", a.naming, "gallery")
    return probe, gallery


def evaluate_model(model, metric, probe, gallery, protocol="cross_camera", ks=DEFAULT_KS):
    dist = pairwise_distances(metric, extract_features(model, probe), extract_features(model, gallery))
    report = evaluate(dist, [r.identity for r in probe], [r.identity for r in gallery],
                      [r.camera for r in probe], [r.camera for r in gallery], protocol, ks)
    return report, dist


def cmd_eval(a) -> int:
    model = load_checkpoint(a.model)
    metric = parse_metric(a.metric)
    probe, gallery = _eval_sets(a)
    report, dist = evaluate_model(model, metric, probe, gallery, a.protocol, tuple(a.ks))
    doc = report.to_json()
    if a.baseline:
        doc["map_ratio"] = map_ratio(report, EvalReport.load(a.baseline))
    text = json.dumps(doc, indent=1) + "\n"
    if a.out:
        out = Path(a.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _write_run_config(_file_record(out), "eval", vars_of(a))
    sys.stdout.write(text)
    if a.baseline:
        print(f"mAP ratio: {doc['map_ratio']:.6f}")
    if a.strips:
        strip_dir = Path(a.strip_dir or (Path(a.out).parent if a.out else ".")) / "rankings"
        strip_dir.mkdir(parents=True, exist_ok=True)
        gl = [r.identity for r in gallery]
        lists = []
        for i in range(min(a.strips, len(probe))):
            rl = ranking_list(i, dist, gl, min(a.top_k, len(gallery)), probe[i].identity)
            entry = rl.to_json()
            entry["probe_file"] = probe[i].source_path
            entry["gallery_files"] = [gallery[j].source_path for j in rl.gallery_indices]
            lists.append(entry)
            strip = render_strip(probe[i].pixels, [gallery[j].pixels for j in rl.gallery_indices], rl.relevant)
            write_png(strip_dir / f"probe_{i:04d}.png", strip)
        (strip_dir / "rankings.json").write_text(json.dumps(lists, indent=1) + "\n")
    return 0


def cmd_bench(a) -> int:
    """White-box (diagonal) / black-box (off-diagonal) mAP matrix over checkpoints."""
    ds = load_dataset(a.data)
    paths = a.models.split(",")
    models = [load_checkpoint(p) for p in paths]
    metric = parse_metric(a.metric)
    table = {"clean": {}, "attacks": []}
    for p, m in zip(paths, models):
        table["clean"][p] = evaluate_model(m, metric, ds.probe, ds.gallery)[0].mAP
    for method in a.methods.split(","):
        a.method = method
        cfg = _attack_config(a)
        for p, m in zip(paths, models):
            examples = attack_gallery([m], metric, ds.probe, ds.gallery, cfg)
            adv = [ex.as_record(quantized=True) for ex in examples]
            row = {"attacker": p, "method": method,
                   "mAP": {q: evaluate_model(t, metric, ds.probe, adv)[0].mAP for q, t in zip(paths, models)}}
            table["attacks"].append(row)
    a.method = a.methods
    text = json.dumps(table, indent=1) + "\n"
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    _write_run_config(_file_record(out), "bench", vars_of(a))
    sys.stdout.write(text)
    return 0


def cmd_replay(a) -> int:
    """Re-run a recorded command, optionally redirecting its outputs."""
    doc = json.loads(Path(a.record).read_text())
    args = dict(doc["args"])
    for key in ("out", "adv_out", "strip_dir"):
        override = getattr(a, key, None)
        if override is not None:
            args[key] = override
    ns = argparse.Namespace(**args)
    return COMMANDS[doc["command"]](ns)


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "attack": cmd_attack, "defend": cmd_defend,
    "eval": cmd_eval, "bench": cmd_bench, "replay": cmd_replay,
}


def vars_of(a) -> dict:
    return {k: v for k, v in vars(a).items() if k not in ("func", "threads", "verbose", "command")}


# -- parser ---------------------------------------------------------------------------

def _add_attack_flags(p, targeted=True):
    p.add_argument("--method", choices=["fgsm", "i_fgsm", "mi_fgsm"], default="i_fgsm")
    p.add_argument("--eps", type=float, default=5.0, help="L-inf budget in pixel levels")
    p.add_argument("--alpha", type=float, default=None, help="step size (default min(1, eps))")
    p.add_argument("--mu", type=float, default=1.0, help="momentum decay for mi_fgsm")
    p.add_argument("--iters", default="auto", help="iteration count or 'auto'")
    p.add_argument("--metric", default="euclidean", help="euclidean | mahalanobis:M.json")
    if targeted:
        p.add_argument("--targeted", action="store_true")
        p.add_argument("--target", type=int, default=None, help="fixed target identity")
    else:
        p.set_defaults(targeted=False, target=None)


def _add_train_flags(p, seed_default=0):
    p.add_argument("--hidden", type=_ints, default=[256, 128])
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--margin", type=float, default=0.3)
    p.add_argument("--pk", type=_ints, default=[8, 4], help="P,K for triplet batches")
    p.add_argument("--seed", type=int, default=seed_default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matk", description="Metric attack and defense toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None, help="BLAS threads (default: all cores)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic identity dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-train-ids", type=int, default=64)
    p.add_argument("--num-test-ids", type=int, default=32)
    p.add_argument("--images-per-id", type=int, default=4)
    p.add_argument("--num-cameras", type=int, default=2)
    p.add_argument("--image-size", type=_ints, default=[32, 16, 3])
    p.add_argument("--contrast", type=float, default=SynthSpec.contrast)
    p.add_argument("--color-sigma", type=float, default=Jitter.color_sigma)
    p.add_argument("--shift-max", type=int, default=Jitter.shift_max)
    p.add_argument("--noise-sigma", type=float, default=Jitter.noise_sigma)

    p = sub.add_parser("train", help="train an embedder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss", choices=sorted(LOSSES), default="ce")
    _add_train_flags(p)

    p = sub.add_parser("attack", help="build an adversarial gallery")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True, help="comma-separated checkpoints (ensemble if several)")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["gallery", "train"], default="gallery")
    p.add_argument("--seed", type=int, default=0)
    _add_attack_flags(p)

    p = sub.add_parser("defend", help="train a metric-preserving model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="clean checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--adv-out", required=True, help="directory for the adversarial training set")
    p.add_argument("--loss", default=None, help=argparse.SUPPRESS)
    _add_attack_flags(p, targeted=False)
    _add_train_flags(p, seed_default=None)

    p = sub.add_parser("eval", help="mAP / CMC evaluation")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default=None, help="dataset directory with probe/ and gallery/")
    p.add_argument("--probe", default=None)
    p.add_argument("--gallery", default=None, help="override gallery folder (e.g. adversarial)")
    p.add_argument("--naming", choices=["market_style", "flat"], default="market_style")
    p.add_argument("--metric", default="euclidean")
    p.add_argument("--protocol", choices=["cross_camera", "all"], default="cross_camera")
    p.add_argument("--ks", type=_ints, default=list(DEFAULT_KS))
    p.add_argument("--out", default=None)
    p.add_argument("--baseline", default=None, help="clean report.json for the mAP ratio")
    p.add_argument("--strips", type=int, default=0, help="write ranking strips for the first N probes")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--strip-dir", default=None)

    p = sub.add_parser("bench", help="white/black-box matrix over checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--methods", default="fgsm,i_fgsm,mi_fgsm")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_attack_flags(p, targeted=False)

    p = sub.add_parser("replay", help="re-run a recorded run_config")
    p.add_argument("record")
    p.add_argument("--out", default=None)
    p.add_argument("--adv-out", default=None)
    p.add_argument("--strip-dir", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if a.command == "eval" and not a.data and not (a.probe and a.gallery):
        parser.error("eval needs --data or both --probe and --gallery")
    try:
        if a.threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(a.threads):
                return COMMANDS[a.command](a)
        return COMMANDS[a.command](a)
    except Exception as exc:  # noqa: BLE001 - report and exit 1
        log.debug("failure", exc_info=True)
        print(f"matk {a.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
