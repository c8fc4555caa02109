"""Command-line entry point: ``p2cad <subcommand> [flags]``.

Structured results go to stdout as one JSON object. Failures print one JSON
line ``{"error": CODE, "message": ...}`` to stderr and exit 1 (runtime) or
2 (usage and configuration).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import cad_lang as cl
from . import fixtures
from . import geometry as g
from . import network as nw
from . import trainer as tr
from .errors import P2CadError

EXIT_RUNTIME = 1
EXIT_USAGE = 2

_NET_FIELDS = {f.name for f in fields(nw.NetworkConfig)}


class ConfigError(Exception):
    """Invalid configuration value; ``field`` names the offending entry."""

    code = "BadConfig"

    def __init__(self, field, message):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class CliConfig:
    network: nw.NetworkConfig
    epochs: int = 300
    lr: float = 1e-4
    batch: int = 32
    seed: int = 0
    max_steps: int | None = None
    checkpoint_every: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999

    def validate(self):
        for name in ("epochs", "batch", "checkpoint_every"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(name, f"must be a positive integer, got {getattr(self, name)!r}")
        if not isinstance(self.lr, (int, float)) or not np.isfinite(self.lr) or self.lr < 0:
            raise ConfigError("lr", f"must be a finite non-negative number, got {self.lr!r}")
        for name in ("adam_beta1", "adam_beta2"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not 0 <= v < 1:
                raise ConfigError(name, f"must lie in [0, 1), got {v!r}")
        if self.max_steps is not None and (not isinstance(self.max_steps, int) or self.max_steps < 0):
            raise ConfigError("max_steps", f"must be a non-negative integer, got {self.max_steps!r}")
        return self

    @classmethod
    def from_dict(cls, d):
        """Flat dict: network fields and trainer fields side by side."""
        known = _NET_FIELDS | {f.name for f in fields(cls)} - {"network"}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown field")
        net = {k: v for k, v in d.items() if k in _NET_FIELDS}
        try:
            network = nw.desk_config(**net)
        except (TypeError, ValueError) as exc:
            raise ConfigError(_blame(str(exc), net), str(exc)) from None
        rest = {k: v for k, v in d.items() if k not in _NET_FIELDS}
        return cls(network, **rest).validate()

    def to_dict(self):
        d = asdict(self.network)
        d.update({k: v for k, v in asdict(self).items() if k != "network"})
        return d


def _blame(message, fields_given):
    hits = [(message.find(name), name) for name in _NET_FIELDS if name in message]
    if hits:
        return min(hits)[1]
    return next(iter(fields_given), "network")


def load_config(path=None, **overrides):
    """Desk defaults, then the JSON file at ``path``, then non-None ``overrides``."""
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config", "top level must be a JSON object")
    d.update({k: v for k, v in overrides.items() if v is not None})
    return CliConfig.from_dict(d)


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------- subcommands

def cmd_gen_dataset(args):
    spec = tr.DatasetSpec(count=args.count, seed=args.seed, n_points=args.points)
    ds = tr.generate_dataset(spec)
    tr.save_dataset(ds, args.out)
    _emit({"out": str(args.out), "count": len(ds), "n_points": spec.n_points, "seed": spec.seed})


def _read_sequence(args):
    if args.fixture:
        return fixtures.bundled(args.fixture)
    return cl.load_sequence(args.seq)


def cmd_exec(args):
    seq = _read_sequence(args)
    pc = g.sample_surface(g.execute(seq), args.points, args.seed)
    g.save_cloud(pc, args.out)
    _emit({"out": str(args.out), "n_points": len(pc), "seed": args.seed})


def cmd_train(args):
    cfg = load_config(args.config, epochs=args.epochs, lr=args.lr, batch=args.batch,
                      beta=args.beta, seed=args.seed, max_steps=args.max_steps)
    ds = tr.load_dataset(args.data)
    params = nw.NetworkParams.init(cfg.network, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True) + "\n")
    res = tr.train(params, ds, epochs=cfg.epochs, lr=cfg.lr, batch=cfg.batch,
                   beta=cfg.network.beta, seed=cfg.seed, out_dir=out,
                   checkpoint_every=cfg.checkpoint_every, max_steps=cfg.max_steps,
                   beta1=cfg.adam_beta1, beta2=cfg.adam_beta2)
    last = res.curve[-1] if res.curve else (0, None, None, None)
    _emit({"out": str(out), "steps": res.steps, "loss": last[1],
           "loss_cmd": last[2], "loss_param": last[3]})


def cmd_reconstruct(args):
    params = nw.NetworkParams.load(args.ckpt)
    pc = g.normalize(g.load_cloud(args.cloud))
    tokens = nw.decode_prediction(nw.predict(pc.points, params))
    report = cl.validate_syntax(tokens)
    if not report.ok:
        _fail("InvalidSequence", "decoded tokens violate the grammar: "
              + ",".join(report.violations), EXIT_RUNTIME)
    seq = cl.from_token_matrix(tokens)
    cl.save_sequence(seq, args.out)
    _emit({"out": str(args.out), "n_commands": len(seq),
           "executable": bool(g.is_valid_model(tokens))})


def cmd_eval(args):
    params = nw.NetworkParams.load(args.ckpt)
    ds = tr.load_dataset(args.data)
    rep = tr.evaluate(params, ds, eta=args.eta)
    text = rep.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_metrics(args):
    a, b = g.load_cloud(args.pred), g.load_cloud(args.gt)
    if not args.raw:
        a, b = g.normalize(a), g.normalize(b)
    _emit({"chamfer_distance": g.chamfer_distance(a, b), "normalized": not args.raw})


def cmd_gradcheck(args):
    from .gradcheck import network_gradcheck

    results = network_gradcheck(seed=args.seed)
    ok = all(r.ok for r in results)
    _emit({"ok": ok, "max_rel_error": max(r.rel_error for r in results),
           "tensors": {r.name: {"rel_error": r.rel_error, "probes": r.n_probes}
                       for r in results}})
    return 0 if ok else EXIT_RUNTIME


# ---------------------------------------------------------------- parser

def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="p2cad", description="Point cloud to CAD sequence tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-dataset", help="generate a synthetic dataset directory")
    s.add_argument("--count", type=_positive, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--points", type=_positive, default=2048)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("exec", help="execute a sequence and sample its surface")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--seq", type=Path)
    src.add_argument("--fixture", choices=("cube", "cylinder", "cut_block"))
    s.add_argument("--points", type=_positive, default=2048)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_exec)

    s = sub.add_parser("train", help="train a model on a dataset directory")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch", type=int)
    s.add_argument("--beta", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--config", type=Path, help="JSON file of network and trainer fields")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="predict a sequence for one cloud")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--cloud", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("eval", help="score a checkpoint on a dataset directory")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--eta", type=int, default=3)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("metrics", help="chamfer distance between two clouds")
    s.add_argument("--pred", type=Path, required=True)
    s.add_argument("--gt", type=Path, required=True)
    s.add_argument("--raw", action="store_true", help="skip normalization")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("gradcheck", help="finite-difference check of the tiny network")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


class _Exit(Exception):
    def __init__(self, status):
        self.status = status


def _fail(code, message, status, **extra):
    print(json.dumps({"error": code, "message": message, **extra}, sort_keys=True),
          file=sys.stderr)
    raise _Exit(status)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        try:
            return args.func(args) or 0
        except ConfigError as exc:
            _fail(exc.code, str(exc), EXIT_USAGE, field=exc.field)
        except P2CadError as exc:
            _fail(exc.code, str(exc), EXIT_RUNTIME)
        except OSError as exc:
            _fail("OSError", f"{exc.filename}: {exc.strerror}", EXIT_RUNTIME)
    except _Exit as e:
        return e.status


if __name__ == "__main__":
    sys.exit(main())
