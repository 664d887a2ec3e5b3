"""Command-line pipeline: generate, train, construct, eval, viz.

Exit codes: 0 success, 2 validation error, 3 infeasible target sparsity.
``--model`` accepts a JSON path or ``fixture:<name>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, kernels
from .checkpoint import latest_checkpoint
from .data import DatasetError, DatasetHandle, load_fashion_mnist, synth_dataset
from .dot import emit_dot
from .engine import ParamStore, make_store, predict, softmax_cross_entropy
from .fixtures import fixture_text
from .h2spg import H2SPG, H2SPGConfig, InfeasibleSparsityError
from .ir import GraphError
from .modelio import atomic_write, model_hash, parse_model_spec, read_blob, serialize_model, write_blob
from .search_space import build_segment_graph, discover_removal_structures, report
from .surgeon import apply_surgery, equivalence_check, plan_surgery, report_compression

log = logging.getLogger("graphprune")

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 2, 3
DTYPES = {"float32": np.float32, "float64": np.float64}


class ConfigError(ValueError):
    pass


# -- helpers ----------------------------------------------------------------

def read_model(ref: str):
    """Model text, graph and embedded parameters for a path or fixture ref."""
    if ref.startswith("fixture:"):
        try:
            text = fixture_text(ref.split(":", 1)[1])
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None
    else:
        p = Path(ref)
        if not p.is_file():
            raise ConfigError(f"model file not found: {ref}")
        text = p.read_text()
    g, values = parse_model_spec(text)
    return text, g, values


def _write_json(path: Path, obj: Any) -> None:
    atomic_write(path, json.dumps(obj, indent=1, default=_default) + "\n")


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(type(o).__name__)


def run_manifest(command: str, model_text: str, **extra) -> dict[str, Any]:
    return {"command": command, "model_sha256": model_hash(model_text), "package_version": __version__,
            "kernel_backend": kernels.BACKEND, "numpy": np.__version__,
            "python": platform.python_version(), **extra}


def load_dataset(spec: dict[str, Any], base: Path | None = None) -> DatasetHandle:
    spec = dict(spec)
    kind = spec.pop("kind", "synthetic")
    if kind == "synthetic":
        allowed = {"classes", "dims", "samples", "seed", "margin", "test_samples", "noise"}
        bad = set(spec) - allowed
        if bad:
            raise ConfigError(f"unknown synthetic data keys: {sorted(bad)}")
        return synth_dataset(**spec)
    if kind == "fashion-mnist":
        d = Path(spec.pop("dir"))
        if base is not None and not d.is_absolute():
            d = base / d
        if not d.is_dir():
            raise ConfigError(f"dataset directory not found: {d}")
        return load_fashion_mnist(d, spec.get("train_limit"), spec.get("test_limit"), spec.get("seed", 0))
    raise ConfigError(f"unknown dataset kind {kind!r}")


def parse_data_arg(arg: str) -> tuple[dict[str, Any], Path | None]:
    p = Path(arg)
    if p.is_file():
        return json.loads(p.read_text()), p.parent
    try:
        return json.loads(arg), None
    except json.JSONDecodeError:
        raise ConfigError(f"--data is neither a file nor inline JSON: {arg!r}") from None


def load_params(g, path, dtype=None) -> ParamStore:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"params file not found: {path}")
    values = read_blob(p)
    dt = dtype or next(iter(values.values())).dtype
    store = ParamStore.for_graph(g, dt)
    try:
        store.load(values, strict=True)
    except KeyError as exc:
        raise ConfigError(f"params file {path} lacks tensor {exc.args[0]}") from None
    return store


# -- config -----------------------------------------------------------------

@dataclass
class RunConfig:
    model: str
    data: dict[str, Any]
    out: str
    K: int
    total_epochs: int
    dtype: str = "float32"
    deterministic: bool = True
    init_seed: int = 0
    optimizer: dict[str, Any] = field(default_factory=dict)
    base: Path | None = None

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        own = {f.name for f in fields(cls)} - {"optimizer", "base"}
        opt_keys = set(H2SPGConfig.__dataclass_fields__) - {"K", "total_epochs"}
        unknown = set(raw) - own - opt_keys
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"model", "data", "out", "K", "total_epochs"} - set(raw)
        if missing:
            raise ConfigError(f"config lacks {sorted(missing)}")
        cfg = cls(**{k: raw[k] for k in own if k in raw},
                  optimizer={k: raw[k] for k in opt_keys if k in raw}, base=p.parent)
        if cfg.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        cfg.h2spg()  # validate ranges early
        return cfg

    def resolve(self, ref: str) -> str:
        if ref.startswith("fixture:") or self.base is None or Path(ref).is_absolute():
            return ref
        return str(self.base / ref)

    def h2spg(self) -> H2SPGConfig:
        try:
            return H2SPGConfig(K=self.K, total_epochs=self.total_epochs, **self.optimizer)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid optimizer settings: {exc}") from None

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("base")
        d.update(d.pop("optimizer"))
        return d


# -- commands ---------------------------------------------------------------

def cmd_generate(args) -> int:
    text, g, _ = read_model(args.model)
    sg = build_segment_graph(g)
    part = discover_removal_structures(sg, g)
    rep = report(sg, part, g)
    if not part.groups:
        print("warning: no removal structures found", file=sys.stderr)
    out = Path(args.out)
    redundant = [s for grp in part.groups for s in sg.segments[grp.segment].members]
    _write_json(out / "search_space.json", rep)
    atomic_write(out / "trace.dot", emit_dot(g, redundant, name="trace"))
    atomic_write(out / "segments.dot", emit_dot(sg, [grp.segment for grp in part.groups], name="segments"))
    _write_json(out / "manifest.json", run_manifest("generate", text))
    print(f"{len(sg.segments)} segments, |G_s| = {len(part.groups)}: {', '.join(part.ids)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    text, g, values = read_model(cfg.resolve(cfg.model))
    dtype = DTYPES[cfg.dtype]
    data = load_dataset(cfg.data, cfg.base).astype(dtype)
    sg = build_segment_graph(g)
    part = discover_removal_structures(sg, g)
    opt = cfg.h2spg()
    out = Path(cfg.resolve(cfg.out))
    out.mkdir(parents=True, exist_ok=True)
    store = make_store(g, values, cfg.init_seed, dtype)
    ckdir = out / "checkpoints"
    resume = args.resume
    if resume == "latest":
        resume = latest_checkpoint(ckdir)
        if resume is None:
            raise ConfigError(f"no checkpoint in {ckdir}")
    manifest = run_manifest("train", text, config=cfg.to_json(), seed=opt.seed, dtype=cfg.dtype,
                           data=data.manifest(), resumed_from=str(resume) if resume else None)
    _write_json(out / "manifest.json", manifest)
    mode = "a" if resume else "w"
    with open(out / "metrics.jsonl", mode) as stream:
        trainer = H2SPG(g, part, sg, data, opt, store, metrics_stream=stream, checkpoint_dir=ckdir,
                        stop_after_epoch=args.stop_after)
        if resume:
            trainer.restore(resume)
        sol = trainer.run()
        if sol is None:
            print(f"stopped after epoch {trainer.epoch}", file=sys.stderr)
            return EXIT_OK
    write_blob(out / "solution.bin", sol.store.state())
    doc = sol.to_json()
    doc.update(params="solution.bin", model_sha256=model_hash(text),
               final_eval_acc=sol.history[-1]["eval_acc"] if sol.history else None)
    _write_json(out / "solution.json", doc)
    print(f"zero groups ({len(sol.zero_groups)}): {', '.join(sol.zero_groups) or '-'}")
    return EXIT_OK


def _load_solution(path) -> tuple[dict, Path]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"solution file not found: {path}")
    return json.loads(p.read_text()), p.parent


def cmd_construct(args) -> int:
    text, g, _ = read_model(args.model)
    sol, base = _load_solution(args.solution)
    store = load_params(g, base / sol["params"])
    sg = build_segment_graph(g)
    part = discover_removal_structures(sg, g)
    plan = plan_surgery(g, sg, part, sol["zero_groups"])
    sub = apply_surgery(g, store, plan)
    rng = np.random.default_rng(args.seed)
    shape = tuple(g.vertices[g.inputs[0]].attrs["shape"])
    probe = rng.standard_normal((args.probe,) + shape).astype(store.dtype)
    diff = equivalence_check(g, store, sub, probe)
    out = Path(args.out)
    sub_text = serialize_model(sub.graph)
    atomic_write(out / "subnet.json", sub_text)
    write_blob(out / "subnet.bin", sub.store.state())
    _write_json(out / "provenance.json", sub.provenance_json())
    rep = {"plan": plan.to_json(), "compression": report_compression(g, sub.graph),
           "equivalence_max_abs_diff": diff, "probe_inputs": args.probe}
    _write_json(out / "construct_report.json", rep)
    _write_json(out / "manifest.json", run_manifest("construct", text, subnet_sha256=model_hash(sub_text),
                                                    solution=str(args.solution)))
    c = rep["compression"]
    print(f"params {c['params_sub']}/{c['params_full']} ({c['param_ratio']:.3f}), "
          f"flops ratio {c['flop_ratio']:.3f}, max |diff| {diff:.3g}")
    return EXIT_OK


def evaluate(g, store, data: DatasetHandle) -> dict[str, float]:
    logits = predict(g, store, data.test_x.astype(store.dtype))
    loss, _ = softmax_cross_entropy(logits.astype(np.float64), data.test_y)
    return {"accuracy": float(np.mean(logits.argmax(1) == data.test_y)), "loss": loss,
            "samples": int(len(data.test_y))}


def cmd_eval(args) -> int:
    _, g, _ = read_model(args.model)
    store = load_params(g, args.params)
    spec, base = parse_data_arg(args.data)
    res = evaluate(g, store, load_dataset(spec, base))
    print(json.dumps(res))
    return EXIT_OK


def cmd_viz(args) -> int:
    _, g, _ = read_model(args.model)
    sg = build_segment_graph(g)
    part = discover_removal_structures(sg, g)
    if args.annotate:
        sol, _ = _load_solution(args.annotate)
        segs = [part.segment_of(k) for k in sol["zero_groups"]]
    else:
        segs = [grp.segment for grp in part.groups]
    if args.segments:
        text = emit_dot(sg, segs, name="segments")
    else:
        text = emit_dot(g, [m for s in segs for m in sg.segments[s].members], name="trace")
    atomic_write(args.out, text)
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="graphprune", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="build the search space of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train with hierarchical half-space projection")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint sidecar/prefix, or 'latest'")
    p.add_argument("--stop-after", type=int, help="stop after this many epochs (for resumable runs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("construct", help="build the compact sub-network of a solution")
    p.add_argument("--model", required=True)
    p.add_argument("--solution", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--probe", type=int, default=64, help="random inputs for the equivalence check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_construct)

    p = sub.add_parser("eval", help="test accuracy and loss")
    p.add_argument("--model", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--data", required=True, help="data spec JSON file or inline JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="write a DOT drawing")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--annotate", help="solution JSON whose zero groups are drawn dashed")
    p.add_argument("--segments", action="store_true", help="draw the segment graph")
    p.set_defaults(func=cmd_viz)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InfeasibleSparsityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (GraphError, ConfigError, DatasetError, FileNotFoundError, KeyError,
            json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
