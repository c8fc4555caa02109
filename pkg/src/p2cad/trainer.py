"""Losses, metrics, synthetic data and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cad_lang import (
    ARITY_MASK,
    MAX_LEN,
    N_PARAMS,
    BooleanOp,
    CadSequence,
    CommandType,
    ExtentType,
    arc,
    circle,
    eos,
    ext,
    from_token_matrix,
    line,
    read_tokens,
    sol,
    to_token_matrix,
    write_tokens,
)
from .errors import BadSpec, Diverged, FormatError, NumericError, P2CadError, ShapeError
from .geometry import (
    PointCloud,
    chamfer_distance,
    cloud_from_bytes,
    cloud_to_bytes,
    execute,
    is_valid_model,
    normalize,
    sample_surface,
)
from .network import decode_prediction, forward, predict

log = logging.getLogger(__name__)


def worker_count(default=1):
    """Worker threads, capped by the P2CAD_THREADS environment variable."""
    env = os.environ.get("P2CAD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return default


# ---------------------------------------------------------------- losses

@dataclass(frozen=True)
class LossReport:
    loss_cmd: float
    loss_param: float
    loss: float


def loss_tensors(pred, target, beta):
    """(total, cmd, param) loss Tensors, summed per sample and averaged over the batch."""
    target = np.asarray(target)
    if target.ndim == 2:
        target = target[None]
    logits_c, logits_p = pred.cmd_logits, pred.param_logits
    B = target.shape[0]
    if logits_c.shape[:-1] != target.shape[:2] or logits_p.shape[:-1] != target[..., 1:].shape:
        raise ShapeError(f"targets {target.shape} vs prediction {logits_c.shape}/{logits_p.shape}")
    l_cmd = ad.scale(ad.cross_entropy(logits_c, target[..., 0]), 1.0 / B)
    l_param = ad.scale(ad.cross_entropy(logits_p, target[..., 1:]), 1.0 / B)
    return ad.add(l_cmd, ad.scale(l_param, beta)), l_cmd, l_param


def loss(pred, target, beta=2.0):
    """Command and parameter cross-entropy; UNUSED slots are ordinary targets."""
    target = np.asarray(target)
    if pred.cmd_logits is not None:
        _, l_cmd, l_param = loss_tensors(pred, target, beta)
        lc, lp = float(l_cmd.data), float(l_param.data)
    else:
        cmd, param = np.asarray(pred.cmd), np.asarray(pred.param)
        if cmd.shape[:-1] != target.shape[:-1] or param.shape[:-1] != target[..., 1:].shape:
            raise ShapeError(f"targets {target.shape} vs prediction {cmd.shape}/{param.shape}")
        batch = target.shape[0] if target.ndim == 3 else 1
        tiny = np.finfo(float).tiny
        pc = np.take_along_axis(cmd, target[..., :1], axis=-1)
        pp = np.take_along_axis(param, target[..., 1:, None], axis=-1)
        lc = float(-np.log(np.maximum(pc, tiny)).sum()) / batch
        lp = float(-np.log(np.maximum(pp, tiny)).sum()) / batch
    return LossReport(lc, lp, lc + beta * lp)


# ---------------------------------------------------------------- metrics

def acc_cmd(pred_tokens, gt_tokens):
    """Fraction of the N positions (padding included) with the right command."""
    p, g = np.asarray(pred_tokens), np.asarray(gt_tokens)
    return float(np.mean(p[..., 0] == g[..., 0]))


def param_hits(pred_tokens, gt_tokens, eta):
    """(hits, evaluated): used ground-truth slots under a correct command."""
    p, g = np.asarray(pred_tokens), np.asarray(gt_tokens)
    codes = g[..., 0]
    same = p[..., 0] == codes
    used = ARITY_MASK[np.clip(codes, 0, len(CommandType) - 1)] & same[..., None]
    close = np.abs(p[..., 1:] - g[..., 1:]) < eta
    return int((close & used).sum()), int(used.sum())


def acc_param(pred_tokens, gt_tokens, eta=3):
    """Parameter accuracy within ``eta`` classes; 1.0 when nothing is evaluated."""
    hits, k = param_hits(pred_tokens, gt_tokens, eta)
    return hits / k if k else 1.0


@dataclass
class MetricsReport:
    acc_cmd: float
    acc_param: float
    cd_median: float | None
    cd_mean: float | None
    invalid_ratio: float
    n_models: int
    n_invalid: int
    n_params_evaluated: int
    eta: int
    cds: list = field(default_factory=list, repr=False)

    def to_json(self):
        d = asdict(self)
        d.pop("cds")
        return json.dumps(d, sort_keys=True)


def stored_cloud(solid, n_points, seed):
    """Normalized surface sample rounded to the float32 precision of the cloud files."""
    pts = normalize(sample_surface(solid, n_points, seed)).points
    return PointCloud(pts.astype(np.float32).astype(np.float64))


def _model_cd(tokens, gt_cloud, cloud_seed):
    """CD against the stored ground-truth cloud, or None for an invalid model."""
    n = len(gt_cloud)
    if not is_valid_model(tokens, n, cloud_seed):
        return None
    pred_cloud = stored_cloud(execute(from_token_matrix(tokens)), n, cloud_seed)
    return chamfer_distance(pred_cloud, gt_cloud)


def evaluate_predictions(pred_tokens, dataset, eta=3, workers=None):
    """Token and geometry metrics for decoded predictions aligned with ``dataset``."""
    if len(dataset) == 0:
        raise BadSpec("empty dataset")
    pred_tokens = np.asarray(pred_tokens)
    gt = dataset.tokens
    hits, k = param_hits(pred_tokens, gt, eta)
    workers = workers or worker_count()
    jobs = [(pred_tokens[i], dataset.cloud(i), dataset.cloud_seeds[i]) for i in range(len(dataset))]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            cds = list(pool.map(lambda j: _model_cd(*j), jobs))
    else:
        cds = [_model_cd(*j) for j in jobs]
    valid = [c for c in cds if c is not None]
    n_invalid = len(cds) - len(valid)
    return MetricsReport(
        acc_cmd=acc_cmd(pred_tokens, gt),
        acc_param=hits / k if k else 1.0,
        cd_median=float(np.median(valid)) if valid else None,
        cd_mean=float(np.mean(valid)) if valid else None,
        invalid_ratio=n_invalid / len(cds),
        n_models=len(cds),
        n_invalid=n_invalid,
        n_params_evaluated=k,
        eta=eta,
        cds=cds,
    )


def predict_tokens(params, dataset, batch=16):
    out = []
    for start in range(0, len(dataset), batch):
        pts = dataset.clouds[start:start + batch]
        out.append(decode_prediction(predict(pts, params)))
    return np.concatenate(out)


def evaluate(params, dataset, eta=None, batch=16, workers=None):
    """Run the model on every cloud of ``dataset`` and score the decoded tokens."""
    eta = params.config.eta if eta is None else eta
    return evaluate_predictions(predict_tokens(params, dataset, batch), dataset, eta, workers)


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class DatasetSpec:
    count: int = 32
    seed: int = 0
    n_points: int = 2048
    groups: tuple = (1, 2)
    loops: tuple = (1, 2)
    curves: tuple = (3, 6)
    circle_prob: float = 0.2
    arc_prob: float = 0.3
    max_attempts: int = 100

    def __post_init__(self):
        for name in ("groups", "loops", "curves"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (int(lo), int(hi)))
            if lo < 1 or hi < lo:
                raise BadSpec(f"{name} range {lo}..{hi} is empty or below 1")
        if self.curves[0] < 3:
            raise BadSpec("a polygon loop needs at least 3 curves")
        if self.count < 1:
            raise BadSpec("count must be >= 1")
        if self.n_points < 1:
            raise BadSpec("n_points must be >= 1")
        if not (0 <= self.circle_prob <= 1 and 0 <= self.arc_prob <= 1):
            raise BadSpec("probabilities must lie in [0, 1]")
        # worst case: every loop a polygon with the most curves
        worst = self.groups[1] * (self.loops[1] * (1 + self.curves[1]) + 1) + 1
        if worst > MAX_LEN:
            raise BadSpec(f"longest possible sequence has {worst} > {MAX_LEN} commands")


_AXIS_ANGLES = (-math.pi, -math.pi / 2, 0.0, math.pi / 2)


def _polygon_loop(rng, spec, center, radius):
    """Star-shaped loop with counter-clockwise vertices; returns (curves, inradius)."""
    n = int(rng.integers(spec.curves[0], spec.curves[1] + 1))
    base = 2 * math.pi * np.arange(n) / n + rng.uniform(0, 2 * math.pi)
    ang = base + rng.uniform(-0.15, 0.15, n) * 2 * math.pi / n
    rad = radius * rng.uniform(0.8, 1.0, n)
    pts = center + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    curves = []
    for k in range(n):
        x, y = pts[k]
        if rng.random() < spec.arc_prob:
            curves.append(arc(x, y, rng.uniform(math.pi / 8, math.pi / 2), 1))
        else:
            curves.append(line(x, y))
    # distance from the centre to the closest chord bounds any inner loop
    a, b = pts, np.roll(pts, 1, axis=0)
    d = b - a
    dist = np.abs(d[:, 0] * (center[1] - a[:, 1]) - d[:, 1] * (center[0] - a[:, 0]))
    inradius = float((dist / np.hypot(d[:, 0], d[:, 1])).min())
    return curves, inradius


def _inner_loop(rng, spec, center, bound):
    r = 0.6 * bound
    if rng.random() < 0.5:
        return [circle(center[0], center[1], r)]
    n = int(rng.integers(3, 5))
    ang = 2 * math.pi * np.arange(n) / n + rng.uniform(0, 2 * math.pi)
    return [line(center[0] + r * math.cos(a), center[1] + r * math.sin(a)) for a in ang]


def _random_group(rng, spec, first):
    center = rng.uniform(-0.1, 0.1, 2)
    n_loops = int(rng.integers(spec.loops[0], spec.loops[1] + 1))
    cmds = [sol()]
    if rng.random() < spec.circle_prob:
        r = rng.uniform(0.35, 0.8)
        cmds.append(circle(center[0], center[1], r))
        inradius = r
    else:
        curves, inradius = _polygon_loop(rng, spec, center, rng.uniform(0.45, 0.85))
        cmds.extend(curves)
    if n_loops > 1:
        cmds.append(sol())
        cmds.extend(_inner_loop(rng, spec, center, inradius))
    u = int(rng.integers(0, 3))
    e1 = rng.uniform(0.15, 0.8)
    e2 = -rng.uniform(0.0, 0.6) if u == ExtentType.TWO_SIDED else 0.0
    op = BooleanOp.NEW if first else BooleanOp(int(rng.choice([1, 1, 2, 3])))
    angles = rng.choice(_AXIS_ANGLES, 3)
    origin = rng.uniform(-0.3, 0.3, 3) if not first else rng.uniform(-0.05, 0.05, 3)
    scale = rng.uniform(0.8, 1.2) if first else rng.uniform(0.4, 0.9)
    cmds.append(ext(e1, e2, theta=angles[0], phi=angles[1], gamma=angles[2],
                    px=origin[0], py=origin[1], pz=origin[2], s=scale, b=op, u=u))
    return cmds


def random_sequence(rng, spec=None):
    """One grammar-valid sequence (not necessarily geometrically valid)."""
    spec = spec or DatasetSpec()
    n_groups = int(rng.integers(spec.groups[0], spec.groups[1] + 1))
    cmds = []
    for g in range(n_groups):
        cmds.extend(_random_group(rng, spec, g == 0))
    cmds.append(eos())
    return CadSequence(tuple(cmds))


def sample_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _generate_one(spec, index):
    rng = np.random.default_rng([spec.seed, index])
    cloud_seed = sample_seed(spec.seed, index)
    for _ in range(spec.max_attempts):
        seq = random_sequence(rng, spec)
        try:
            cloud = stored_cloud(execute(seq), spec.n_points, cloud_seed)
        except P2CadError:
            continue
        return to_token_matrix(seq), cloud.points, cloud_seed
    raise BadSpec(f"no valid model after {spec.max_attempts} attempts (sample {index})")


@dataclass
class Dataset:
    """Token matrices with their normalized surface clouds and sampling seeds."""

    spec: DatasetSpec
    tokens: np.ndarray        # (n, 60, 17) int64
    clouds: np.ndarray        # (n, M, 3) float64
    cloud_seeds: list

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, i):
        return self.tokens[i], PointCloud(self.clouds[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def cloud(self, i):
        return PointCloud(self.clouds[i])

    def subset(self, idx):
        idx = list(idx)
        return Dataset(self.spec, self.tokens[idx], self.clouds[idx],
                       [self.cloud_seeds[i] for i in idx])


def generate_dataset(spec, workers=None):
    """Deterministic set of valid (tokens, cloud) pairs; invalid draws are redrawn."""
    if not isinstance(spec, DatasetSpec):
        raise BadSpec("expected a DatasetSpec")
    workers = workers or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda i: _generate_one(spec, i), range(spec.count)))
    else:
        rows = [_generate_one(spec, i) for i in range(spec.count)]
    tokens = np.stack([r[0] for r in rows])
    clouds = np.stack([r[1] for r in rows])
    return Dataset(spec, tokens, clouds, [r[2] for r in rows])


TOKENS_FILE = "tokens.p2cd"
CLOUDS_FILE = "clouds.p2pc"


def save_dataset(ds, directory):
    """manifest.json + P2CD tokens + concatenated P2PC cloud records."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tokens(d / TOKENS_FILE, ds.tokens)
    with open(d / CLOUDS_FILE, "wb") as fh:
        for c in ds.clouds:
            fh.write(cloud_to_bytes(PointCloud(c)))
    manifest = {
        "version": 1,
        "count": len(ds),
        "seed": ds.spec.seed,
        "spec": asdict(ds.spec),
        "cloud_seeds": [int(s) for s in ds.cloud_seeds],
        "tokens": TOKENS_FILE,
        "clouds": CLOUDS_FILE,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(directory):
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{d}: unreadable manifest ({exc})") from None
    tokens = read_tokens(d / manifest.get("tokens", TOKENS_FILE))
    raw = (d / manifest.get("clouds", CLOUDS_FILE)).read_bytes()
    clouds, offset = [], 0
    while offset < len(raw):
        pc, offset = cloud_from_bytes(raw, offset)
        clouds.append(pc.points)
    if len(clouds) != len(tokens) or len(tokens) != manifest["count"]:
        raise FormatError(f"{d}: {len(tokens)} token records, {len(clouds)} clouds, "
                          f"manifest says {manifest['count']}")
    spec = DatasetSpec(**manifest["spec"])
    return Dataset(spec, tokens, np.stack(clouds), list(manifest["cloud_seeds"]))


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: object
    curve: list            # (step, loss, loss_cmd, loss_param)
    steps: int


def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "loss_cmd", "loss_param"])
        for step, l, lc, lp in curve:
            w.writerow([step, repr(l), repr(lc), repr(lp)])


def train(params, dataset, epochs=300, lr=1e-4, batch=32, beta=None, seed=0,
          out_dir=None, checkpoint_every=1, max_steps=None, log_every=50, callback=None,
          beta1=0.9, beta2=0.999):
    """Mini-batch Adam on the summed-per-sample, batch-averaged loss.

    ``params`` is updated in place and also returned. With ``out_dir`` set,
    a checkpoint is written every ``checkpoint_every`` epochs
    (``last.p2ck``) and the loss curve goes to ``loss.csv``.
    ``callback(step, params)`` runs after every optimizer step. ``beta1`` and
    ``beta2`` are the Adam moment decays.
    """
    if len(dataset) == 0:
        raise BadSpec("empty dataset")
    beta = params.config.beta if beta is None else beta
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(params.config.to_json() + "\n")
    rng = np.random.default_rng(seed)
    opt = ad.Adam(params.tensors, lr=lr, beta1=beta1, beta2=beta2)
    curve, step = [], 0
    n = len(dataset)
    try:
        for epoch in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch):
                if max_steps is not None and step >= max_steps:
                    break
                idx = np.sort(order[start:start + batch])
                pred = forward(dataset.clouds[idx], params)
                total, l_cmd, l_param = loss_tensors(pred, dataset.tokens[idx], beta)
                opt.zero_grad()
                ad.backward(total)
                opt.step()
                step += 1
                curve.append((step, float(total.data), float(l_cmd.data), float(l_param.data)))
                if log_every and step % log_every == 0:
                    log.info("step %d loss %.4f", step, curve[-1][1])
                if callback is not None:
                    callback(step, params)
            if out and ((epoch + 1) % checkpoint_every == 0 or epoch == epochs - 1):
                params.save(out / "last.p2ck")
            if max_steps is not None and step >= max_steps:
                break
    except NumericError as exc:
        if out:
            write_curve(out / "loss.csv", curve)
        raise Diverged(f"step {step + 1}: {exc}") from None
    if out:
        params.save(out / "last.p2ck")
        write_curve(out / "loss.csv", curve)
    return TrainResult(params, curve, step)
