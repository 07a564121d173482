"""Command-line entry point: ``mrlrec <command> ...``.

Every command writes exactly one run manifest next to its outputs, holding
the argv, the resolved config, FNV-1a digests of all inputs, the seed, the
output paths and wall-clock timings. :func:`replay` re-runs a manifest after
checking that its inputs are unchanged.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, embeddings, evaluation, trainer, verification
from .seeding import fnv1a64_file
from .types import MRLRecError

SEED_ENV = "MRLREC_SEED"
MANIFEST = "manifest.json"
CHECKPOINT = "model.ckpt"
EPOCH_LOG = "epoch_log.csv"
HIERARCHY = "hierarchy.tsv"

COMMANDS = ("ingest", "split", "synth", "train", "evaluate", "truncated-eval", "verify-theorem")


class ManifestMismatch(MRLRecError):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)  # path -> hex digest
    outputs: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def add_input(self, path) -> None:
        self.inputs[str(path)] = f"{fnv1a64_file(path):016x}"

    def write(self, path) -> None:
        _write_json(path, dataclasses.asdict(self))

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def check_inputs(self) -> None:
        """Raise :class:`ManifestMismatch` if any input changed since the run."""
        for path, digest in self.inputs.items():
            now = f"{fnv1a64_file(path):016x}"
            if now != digest:
                raise ManifestMismatch(f"{path}: digest {now} differs from recorded {digest}")


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, ensure_ascii=False)
        fh.write("\n")


def _resolve_seed(flag, fallback=None) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"{SEED_ENV}={env!r} is not an integer") from None
    return fallback


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _load_json_arg(value) -> dict:
    """A JSON object given inline or as a path to a file."""
    if value is None:
        return {}
    text = value
    if not value.lstrip().startswith("{"):
        text = Path(value).read_text(encoding="utf-8")
    obj = json.loads(text)
    if not isinstance(obj, dict):
        raise ValueError("config must be a JSON object")
    return obj


def _split_inputs(data_dir) -> list[Path]:
    d = Path(data_dir)
    return [d / f for f in data.SPLIT_FILES.values()] + [d / data.INDEX_MAP]


# ---------------------------------------------------------------------------
# commands; each returns the manifest path, or (path, exit code)


def cmd_ingest(args, manifest: RunManifest):
    out = data.ensure_dir(args.out)
    manifest.config = {"format": args.format}
    manifest.add_input(args.input)
    ds = data.ingest(args.input, args.format)
    data.write_pairs(out / data.CANONICAL, data._canonical(ds.interactions), ds)
    data.write_index_map(out / data.INDEX_MAP, ds)
    manifest.outputs = [str(out / data.CANONICAL), str(out / data.INDEX_MAP)]
    print(json.dumps({"users": ds.n_users, "items": ds.n_items, "interactions": len(ds.interactions)}, sort_keys=True))
    return out / MANIFEST


def _ingest_with_map(path: Path, manifest: RunManifest) -> data.InteractionDataset:
    """Read a canonical TSV, keeping dense indices from a sibling index map when present."""
    manifest.add_input(path)
    index_map = path.parent / data.INDEX_MAP
    if not index_map.exists():
        return data.ingest(path, data.TSV)
    manifest.add_input(index_map)
    user_keys, item_keys = data.read_index_map(index_map)
    uidx = {k: i for i, k in enumerate(user_keys)}
    iidx = {k: i for i, k in enumerate(item_keys)}
    rows = set()
    for uk, ik in data._read_pairs(path, data.TSV):
        if uk not in uidx or ik not in iidx:
            raise data.DataError(f"{path}: key pair {uk!r},{ik!r} missing from {index_map}")
        rows.add((uidx[uk], iidx[ik]))
    if not rows:
        raise data.EmptyDataset(f"{path}: no interactions found")
    return data.InteractionDataset(user_keys, item_keys, data._canonical(np.array(sorted(rows), dtype=np.int64)))


def cmd_split(args, manifest: RunManifest):
    seed = _resolve_seed(args.seed, 0)
    manifest.seed = seed
    manifest.config = {"train_ratio": args.train_ratio, "validation_ratio": args.validation_ratio, "seed": seed}
    ds = _ingest_with_map(Path(args.input), manifest)
    ds = data.split(ds, args.train_ratio, args.validation_ratio, seed=seed)
    written = data.write_split(args.out, ds)
    manifest.outputs = sorted(written.values())
    sizes = {name: len(ds.partition(name)) for name in data.SPLIT_FILES}
    print(json.dumps(sizes, sort_keys=True))
    return Path(args.out) / MANIFEST


_SYNTH_FIELDS = [f for f in dataclasses.fields(data.SyntheticSpec) if f.name != "seed"]


def cmd_synth(args, manifest: RunManifest):
    raw = _load_json_arg(args.spec)
    for f in _SYNTH_FIELDS:
        value = getattr(args, f.name)
        if value is not None:
            raw[f.name] = value
    raw["seed"] = _resolve_seed(args.seed, raw.get("seed", 0))
    spec = data.SyntheticSpec(**raw)
    manifest.seed = spec.seed
    manifest.config = dataclasses.asdict(spec)
    if args.spec and not args.spec.lstrip().startswith("{"):
        manifest.add_input(args.spec)
    ds, hierarchy = data.generate_synthetic(spec)
    out = data.ensure_dir(args.out)
    data.write_pairs(out / data.CANONICAL, ds.interactions, ds)
    data.write_index_map(out / data.INDEX_MAP, ds)
    hierarchy.write(out / HIERARCHY)
    manifest.outputs = [str(out / data.CANONICAL), str(out / data.INDEX_MAP), str(out / HIERARCHY)]
    print(json.dumps({"users": ds.n_users, "items": ds.n_items, "interactions": len(ds.interactions)}, sort_keys=True))
    return out / MANIFEST


# flag name -> (config key, parser); sampler keys use the dotted form
_TRAIN_FLAGS = {
    "variant": ("variant", str),
    "learning_rate": ("learning_rate", float),
    "batch_size": ("batch_size", int),
    "max_epochs": ("max_epochs", int),
    "patience": ("patience", int),
    "eval_every": ("eval_every", int),
    "dims": ("dims", _int_list),
    "weights": ("weights", _float_list),
    "strategy": ("sampler.strategy", str),
    "dns_pool_size": ("sampler.dns_pool_size", int),
    "sampler_seed": ("sampler.seed", int),
    "weight_decay": ("weight_decay", float),
    "reduction": ("reduction", str),
    "validation_mode": ("validation_mode", str),
    "bpr_m_mode": ("bpr_m_mode", str),
    "beta1": ("beta1", float),
    "beta2": ("beta2", float),
    "epsilon": ("epsilon", float),
}


def resolve_train_config(args) -> trainer.TrainConfig:
    raw = _load_json_arg(args.config)
    sampler = dict(raw.pop("sampler", None) or {})
    for key, value in sampler.items():
        raw[f"sampler.{key}"] = value
    for flag, (key, _) in _TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            raw[key] = value
    raw["seed"] = _resolve_seed(args.seed, raw.get("seed", 0))
    return trainer.TrainConfig.from_dict(raw)


def cmd_train(args, manifest: RunManifest):
    config = resolve_train_config(args)
    manifest.seed = config.seed
    manifest.config = config.to_dict()
    if args.config and not args.config.lstrip().startswith("{"):
        manifest.add_input(args.config)
    for path in _split_inputs(args.data):
        manifest.add_input(path)
    ds = data.load_split(args.data)
    result = trainer.train(ds, config)
    out = data.ensure_dir(args.out)
    ckpt = out / CHECKPOINT
    result.save(ckpt)
    result.write_log(out / EPOCH_LOG)
    summary = {
        "best_epoch": result.best_epoch,
        "best_val_recall_at_20": result.best_val_recall,
        "stopped_epoch": result.stopped_epoch,
        "repeat_rate": result.repeat_rate,
        "checkpoint_digest": f"{fnv1a64_file(ckpt):016x}",
    }
    _write_json(out / "summary.json", summary)
    manifest.outputs = [str(ckpt), f"{ckpt}.json", str(out / EPOCH_LOG), str(out / "summary.json")]
    print(json.dumps(summary, sort_keys=True))
    return out / MANIFEST


def _load_model(args, manifest: RunManifest):
    ckpt = Path(args.checkpoint)
    manifest.add_input(ckpt)
    sidecar = Path(f"{ckpt}.json")
    config = {}
    if sidecar.exists():
        manifest.add_input(sidecar)
        config = json.loads(sidecar.read_text(encoding="utf-8"))
    tables, sizes = embeddings.load_checkpoint(ckpt)
    for path in _split_inputs(args.data):
        manifest.add_input(path)
    ds = data.load_split(args.data)
    if (tables.users.rows, tables.items.rows) != (ds.n_users, ds.n_items):
        raise embeddings.CheckpointError(
            f"{ckpt}: {tables.users.rows}x{tables.items.rows} tables do not match "
            f"{ds.n_users} users and {ds.n_items} items in {args.data}"
        )
    return tables, sizes, config, ds


def cmd_evaluate(args, manifest: RunManifest):
    tables, sizes, config, ds = _load_model(args, manifest)
    manifest.config = {
        "ks": list(args.ks),
        "dim_cut": args.dim_cut,
        "partition": args.partition,
        "threads": args.threads,
        "model": config,
    }
    report = evaluation.evaluate(tables, ds, args.partition, args.ks, args.dim_cut, threads=args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, report.to_dict())
    manifest.outputs = [str(out)]
    print(report.to_json())
    return Path(f"{out}.manifest.json")


def cmd_truncated_eval(args, manifest: RunManifest):
    tables, sizes, config, ds = _load_model(args, manifest)
    cuts = args.sizes or sizes
    manifest.config = {
        "ks": list(args.ks),
        "sizes": list(cuts),
        "partition": args.partition,
        "threads": args.threads,
        "model": config,
    }
    reports = evaluation.truncated_sweep(tables, ds, cuts, args.partition, args.ks, threads=args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, {"reports": [r.to_dict() for r in reports]})
    outputs = [str(out)]
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(reports[0].csv_header() + "\n")
            for r in reports:
                fh.write(r.csv_row() + "\n")
        outputs.append(str(args.csv))
    manifest.outputs = outputs
    for r in reports:
        print(json.dumps(r.to_dict(), sort_keys=True))
    return Path(f"{out}.manifest.json")


def cmd_verify_theorem(args, manifest: RunManifest):
    seed = _resolve_seed(args.seed, 7)
    manifest.seed = seed
    manifest.config = {"seed": seed, "trials": args.trials, "fd_trials": args.fd_trials}
    report = verification.verify_theorem(seed, args.trials, fd_trials=args.fd_trials)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, report.to_dict())
    manifest.outputs = [str(out)]
    print(json.dumps({"failures": report.failures, "passed": report.passed}, sort_keys=True))
    return Path(f"{out}.manifest.json"), (0 if report.passed else 1)


HANDLERS = {
    "ingest": cmd_ingest,
    "split": cmd_split,
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "truncated-eval": cmd_truncated_eval,
    "verify-theorem": cmd_verify_theorem,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrlrec", description="Matryoshka representation learning for recommendation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="read an interaction file into a canonical TSV and index map")
    p.add_argument("input")
    p.add_argument("--format", choices=data.FORMATS, default=data.TSV)
    p.add_argument("--out", required=True)

    p = sub.add_parser("split", help="per-user 80/20 split plus a global validation sample")
    p.add_argument("input", help="canonical TSV; a sibling index_map.tsv is reused when present")
    p.add_argument("--train-ratio", type=float, default=0.8)
    p.add_argument("--validation-ratio", type=float, default=0.1, help="fraction of the training pairs")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate a hierarchical synthetic dataset")
    p.add_argument("--spec", help="JSON object or path to one")
    for f in _SYNTH_FIELDS:
        kind = float if f.type in ("float", float) else int
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one variant with early stopping")
    p.add_argument("--config", help="JSON object or path to one; flags override its keys")
    p.add_argument("--data", required=True, help="directory written by split")
    p.add_argument("--seed", type=int)
    for flag, (key, kind) in _TRAIN_FLAGS.items():
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=kind, help=f"config key {key}")
    p.add_argument("--out", required=True)

    for name, help_text in (("evaluate", "Recall@K / NDCG@K of a checkpoint"), ("truncated-eval", "metrics per prefix size")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("checkpoint")
        p.add_argument("--data", required=True)
        p.add_argument("--ks", type=_int_list, default=evaluation.DEFAULT_KS)
        p.add_argument("--partition", choices=("validation", "test"), default="test")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", required=True)
    sub.choices["evaluate"].add_argument("--dim-cut", type=int)
    sub.choices["truncated-eval"].add_argument("--sizes", type=_int_list, help="defaults to the checkpoint's sizes")
    sub.choices["truncated-eval"].add_argument("--csv", help="also write one CSV row per size")

    p = sub.add_parser("verify-theorem", help="randomized frozen-block gradient checks")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--fd-trials", type=int, default=5)
    p.add_argument("--out", required=True)
    return parser


def _error_payload(exc: BaseException, command) -> dict:
    payload = {"error": type(exc).__name__, "message": str(exc), "command": command}
    for attr in ("path", "line_no"):
        value = getattr(exc, attr, None)
        if value is not None:
            payload[attr] = str(value) if attr == "path" else value
    return payload


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    manifest = RunManifest(args.command, argv, {}, None)
    started = time.time()
    t0 = time.perf_counter()
    try:
        out = HANDLERS[args.command](args, manifest)
    except (MRLRecError, ValueError, OSError, json.JSONDecodeError, TypeError) as exc:
        print(json.dumps(_error_payload(exc, args.command), sort_keys=True), file=sys.stderr)
        return 2
    code = 0
    if isinstance(out, tuple):
        out, code = out
    manifest.timings = {"started_unix": started, "wall_ms": (time.perf_counter() - t0) * 1000.0}
    manifest.write(out)
    return code


def replay(manifest_path) -> int:
    """Re-run a recorded command after confirming its inputs are byte-identical."""
    manifest = RunManifest.read(manifest_path)
    manifest.check_inputs()
    return main(manifest.argv)


if __name__ == "__main__":
    sys.exit(main())
