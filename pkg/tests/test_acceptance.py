"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

The summary table appears at the end of the pytest run. Criteria 4 and 5
train the desk network and take several minutes each on one core.
"""

import filecmp
import itertools
import math
import re
import time

import numpy as np
import pytest

from p2cad import autodiff as ad
from p2cad import cad_lang as cl
from p2cad import fixtures
from p2cad import geometry as g
from p2cad import network as nw
from p2cad import trainer as tr
from p2cad.cli import main as cli_main
from p2cad.gradcheck import TOL, network_gradcheck

C = cl.CommandType


# ---------------------------------------------------------------- 1

# large-corpus GPU results kept for comparison with the desk-scale numbers
REFERENCE = {"acc_cmd": 0.806, "acc_param": 0.756, "cd_median": 1.90e-3, "invalid_ratio": 0.23}


def test_c1_large_scale_results_not_reproduced(criterion):
    criterion(1, None, "reference table (ACC_cmd %.3f, ACC_param %.3f, median CD %.2e, "
              "invalid %.2f) needs the full corpus and GPU training; criteria 2-9 substitute"
              % tuple(REFERENCE.values()))
    pytest.skip("large-scale reproduction is out of scope")


# ---------------------------------------------------------------- 2

def test_c2_gradient_suite(criterion):
    t0 = time.perf_counter()
    results = network_gradcheck(seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.rel_error)
    bad = [r.name for r in results if not r.ok]
    ok = not bad and elapsed < 300
    criterion(2, ok, f"{len(results)} tensors, worst {worst.name} {worst.rel_error:.1e} "
              f"(tol {TOL:g}), {elapsed:.0f}s")
    assert not bad, bad
    assert elapsed < 300


# ---------------------------------------------------------------- 3

def test_c3_causality(criterion):
    cfg = nw.tiny_config()
    params = nw.NetworkParams.init(cfg, seed=0)
    n = cfg.n_seq
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in (0, n // 2, n - 1):
        x = rng.normal(size=(1, n, cfg.d_model))
        base = nw.causal_decoder(ad.Tensor(x), params).data[0, i]
        for _ in range(100):
            y = x.copy()
            y[0, i + 1:] += rng.normal(size=y[0, i + 1:].shape) * rng.uniform(0.1, 10)
            row = nw.causal_decoder(ad.Tensor(y), params).data[0, i]
            worst = max(worst, float(np.max(np.abs(row - base))))
    # sanity: a change at or before i does reach row i
    y = x.copy()
    y[0, :n - 1] += 1.0
    moved = np.max(np.abs(nw.causal_decoder(ad.Tensor(y), params).data[0, n - 1] - base))
    ok = worst < 1e-9 and moved > 1e-3
    criterion(3, ok, f"max change of row i under later perturbations {worst:.1e} (< 1e-9)")
    assert worst < 1e-9 and moved > 1e-3


# ---------------------------------------------------------------- 4

class _Done(Exception):
    pass


def test_c4_overfit(criterion):
    """32 samples, desk network, 512-point clouds, at most 2000 Adam steps.

    Targets: ACC_cmd >= 0.98, ACC_param(3) >= 0.90, median CD < 0.02 over
    valid reconstructions, under 30 minutes including evaluation. The run
    stops early once every target is met.
    """
    t0 = time.perf_counter()
    ds = tr.generate_dataset(tr.DatasetSpec(count=32, seed=1, n_points=512))
    params = nw.NetworkParams.init(nw.desk_config(), seed=0)
    history = []

    def met(m):
        return (m.acc_cmd >= 0.98 and m.acc_param >= 0.90
                and m.cd_median is not None and m.cd_median < 0.02)

    def check(step, p):
        if step % 250:
            return
        m = tr.evaluate(p, ds, eta=3)
        history.append((step, m))
        print(f"step {step}: acc_cmd {m.acc_cmd:.4f} acc_param {m.acc_param:.4f} "
              f"cd_median {m.cd_median} invalid {m.invalid_ratio:.3f}")
        if met(m):
            raise _Done

    status = "completed"
    try:
        # a short second-moment window keeps the post-LN decoder stable at this lr
        tr.train(params, ds, epochs=500, lr=6e-4, batch=8, seed=0, max_steps=2000,
                 log_every=0, callback=check, beta2=0.9)
    except _Done:
        status = "targets met"
    except tr.Diverged as exc:
        status = f"diverged ({exc})"
    elapsed = time.perf_counter() - t0
    step, m = history[-1] if history else (0, None)
    ok = m is not None and met(m) and elapsed < 1800
    detail = (f"{status} at step {step}: acc_cmd {m.acc_cmd:.4f} (>= 0.98), "
              f"acc_param {m.acc_param:.4f} (>= 0.90), median CD {m.cd_median} (< 0.02), "
              f"invalid {m.invalid_ratio:.2f}, {elapsed / 60:.1f} min"
              if m is not None else f"{status} before the first evaluation")
    criterion(4, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------- 5

def test_c5_learning_signal(criterion):
    train = tr.generate_dataset(tr.DatasetSpec(count=256, seed=100, n_points=512))
    held = tr.generate_dataset(tr.DatasetSpec(count=64, seed=101, n_points=512))
    params = nw.NetworkParams.init(nw.desk_config(), seed=0)
    before = tr.acc_cmd(tr.predict_tokens(params, held), held.tokens)
    tr.train(params, train, epochs=10, lr=6e-4, batch=8, seed=0, max_steps=300, log_every=0,
             beta2=0.9)
    after = tr.acc_cmd(tr.predict_tokens(params, held), held.tokens)
    gain = after - before
    criterion(5, gain >= 0.20, f"held-out ACC_cmd {before:.4f} -> {after:.4f} "
              f"(+{100 * gain:.1f} points, need +20)")
    assert gain >= 0.20


# ---------------------------------------------------------------- 6

def _cd_oracle(a, b):
    def one_way(p, q):
        total = 0.0
        for x in p:
            total += min(math.sqrt(sum((x[k] - y[k]) ** 2 for k in range(3))) for y in q)
        return total / len(p)
    return one_way(a, b) + one_way(b, a)


def test_c6a_chamfer_oracle(criterion):
    rng = np.random.default_rng(60)
    worst = 0.0
    for _ in range(100):
        a = rng.normal(size=(int(rng.integers(1, 60)), 3))
        b = rng.normal(size=(int(rng.integers(1, 60)), 3))
        worst = max(worst, abs(g.chamfer_distance(a, b) - _cd_oracle(a, b)))
    criterion("6a", worst < 1e-12, f"chamfer vs double loop, 100 pairs, max diff {worst:.1e}")
    assert worst < 1e-12


def _nll(row, t):
    m = max(row)
    return m + math.log(sum(math.exp(v - m) for v in row)) - row[t]


def test_c6b_loss_oracle(criterion, random_sequences):
    rng = np.random.default_rng(61)
    b = 2
    cmd_logits = rng.normal(size=(b, 60, 6)) * 3
    param_logits = rng.normal(size=(b, 60, 16, 257)) * 3
    target = np.stack([cl.to_token_matrix(s) for s in random_sequences[:b]])
    rep = tr.loss(nw.Prediction(None, None, ad.Tensor(cmd_logits), ad.Tensor(param_logits)),
                  target, beta=2.0)
    lc = sum(_nll(cmd_logits[s, i], target[s, i, 0]) for s in range(b) for i in range(60)) / b
    lp = sum(_nll(param_logits[s, i, j], target[s, i, 1 + j])
             for s in range(b) for i in range(60) for j in range(16)) / b
    diff = max(abs(rep.loss_cmd - lc), abs(rep.loss_param - lp),
               abs(rep.loss - (lc + 2.0 * lp)) / max(1.0, lc + 2.0 * lp))
    criterion("6b", diff < 1e-10, f"loss vs scalar loop, max diff {diff:.1e}")
    assert diff < 1e-10


GRAMMAR = re.compile(r"(?:(?:S[LAC]+)+X)+E+")
SYMBOLS = "SLACXE"


def test_c6c_syntax_exhaustive(criterion):
    """Every command string of length 1..8 as a standalone token matrix.

    Parameters are left UNUSED, so only grammar violations are compared.
    """
    mismatches = total = 0
    for k in range(1, 9):
        m = np.zeros((k, 17), dtype=np.int64)
        for codes in itertools.product(range(6), repeat=k):
            m[:, 0] = codes
            rep = cl.validate_syntax(m)
            ours = not (set(rep.violations) - {"BadArity"})
            ref = GRAMMAR.fullmatch("".join(SYMBOLS[c] for c in codes)) is not None
            mismatches += ours != ref
            total += 1
    criterion("6c", mismatches == 0, f"validate_syntax vs grammar on all {total} sequences "
              f"of length <= 8, {mismatches} mismatches")
    assert mismatches == 0


def _voxel_oracle(name, seq, q):
    """Analytic membership from the dequantized fixture values."""
    cmds = list(seq)
    exts = [c.values() for c in cmds if c.ctype == C.EXT]
    if name == "cylinder":
        circ, e = cmds[1].values(), exts[0]
        r = circ["r"] * e["s"]
        centre = np.array([circ["x"], circ["y"]]) * e["s"] + [e["px"], e["py"]]
        z = q[:, 2] - e["pz"]
        return ((np.hypot(q[:, 0] - centre[0], q[:, 1] - centre[1]) < r)
                & (z > min(e["e1"], e["e2"])) & (z < max(e["e1"], e["e2"])))

    def box(lines, e):
        xs = [c.values()["x"] for c in lines]
        ys = [c.values()["y"] for c in lines]
        lo = np.array([min(xs) * e["s"] + e["px"], min(ys) * e["s"] + e["py"],
                       min(e["e1"], e["e2"]) + e["pz"]])
        hi = np.array([max(xs) * e["s"] + e["px"], max(ys) * e["s"] + e["py"],
                       max(e["e1"], e["e2"]) + e["pz"]])
        return np.all((q > lo) & (q < hi), axis=1)

    inside = box(cmds[1:5], exts[0])
    if name == "cut_block":
        inside &= ~box(cmds[7:11], exts[1])
    return inside


def test_c6d_voxel_oracle(criterion):
    worst = 1.0
    lines = []
    for name in ("cube", "cylinder", "cut_block"):
        seq = fixtures.bundled(name)
        solid = g.execute(seq)
        lo, hi = solid.bounds()
        pad = 0.1 * (hi - lo)
        axes = [lo[k] - pad[k] + (np.arange(64) + 0.5) * (hi[k] - lo[k] + 2 * pad[k]) / 64
                for k in range(3)]
        q = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        agree = float(np.mean(g.contains(solid, q) == _voxel_oracle(name, seq, q)))
        worst = min(worst, agree)
        lines.append(f"{name} {100 * agree:.2f}%")
    criterion("6d", worst >= 0.995, "contains vs 64^3 voxel oracle: " + ", ".join(lines))
    assert worst >= 0.995


# ---------------------------------------------------------------- 7

def test_c7a_cube_surface(criterion):
    seq = fixtures.bundled("cube")
    e = [c.values() for c in seq if c.ctype == C.EXT][0]
    xs = [c.values()["x"] for c in seq if c.ctype == C.LINE]
    lo = np.array([min(xs) * e["s"], min(xs) * e["s"], min(e["e1"], e["e2"])]) \
        + [e["px"], e["py"], e["pz"]]
    hi = np.array([max(xs) * e["s"], max(xs) * e["s"], max(e["e1"], e["e2"])]) \
        + [e["px"], e["py"], e["pz"]]
    pts = g.sample_surface(g.execute(seq), 4096, seed=0).points
    outside = np.max(np.maximum(lo - pts, pts - hi), axis=1)
    face = np.min(np.minimum(np.abs(pts - lo), np.abs(pts - hi)), axis=1)
    dist = float(np.max(np.maximum(face, outside)))
    criterion("7a", dist <= 1e-6, f"cube samples, max distance to analytic surface {dist:.1e}")
    assert dist <= 1e-6


def test_c7b_cut_volume(criterion):
    seq = fixtures.bundled("cut_block")
    cmds = list(seq)
    outer, inner = cmds[2].values(), cmds[8].values()
    e_out, e_in = cmds[5].values(), cmds[11].values()
    h_out = abs(e_out["e1"] - e_out["e2"])
    # the cut prism spans at least the block height, so the hole goes through
    assert abs(e_in["e1"] - e_in["e2"]) >= h_out
    analytic = ((2 * outer["x"] * e_out["s"]) ** 2 - (2 * inner["x"] * e_in["s"]) ** 2) * h_out
    solid = g.execute(seq)
    lo, hi = solid.bounds()
    q = np.random.default_rng(70).uniform(lo, hi, (400_000, 3))
    mc = float(np.mean(g.contains(solid, q)) * np.prod(hi - lo))
    rel = abs(mc - analytic) / analytic
    criterion("7b", rel < 0.02, f"CUT block Monte-Carlo volume {mc:.4f} vs analytic "
              f"{analytic:.4f} ({100 * rel:.2f}%)")
    assert rel < 0.02


# ---------------------------------------------------------------- 8

def test_c8_round_trips(criterion, random_sequences, tmp_path):
    text_bad = token_bad = 0
    for s in random_sequences:
        text = cl.serialize_sequence(s)
        back = cl.parse_sequence(text)
        text_bad += back != s or cl.serialize_sequence(back) != text
        m = cl.to_token_matrix(s)
        token_bad += cl.from_token_matrix(m) != s or not np.array_equal(
            cl.to_token_matrix(cl.from_token_matrix(m)), m)
    params = nw.NetworkParams.init(nw.desk_config(), seed=8)
    params.save(tmp_path / "m.p2ck")
    loaded = nw.NetworkParams.load(tmp_path / "m.p2ck")
    pts = np.random.default_rng(8).uniform(-1, 1, (2, 256, 3))
    a, b = nw.predict(pts, params), nw.predict(pts, loaded)
    same = np.array_equal(a.cmd, b.cmd) and np.array_equal(a.param, b.param)
    ok = text_bad == 0 and token_bad == 0 and same
    criterion(8, ok, f"{len(random_sequences)} sequences: {text_bad} text and {token_bad} "
              f"token round-trip failures; checkpoint forward bit-identical: {same}")
    assert ok


# ---------------------------------------------------------------- 9

def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    names = sorted(cmp.common_files)
    if cmp.left_only or cmp.right_only or cmp.subdirs:
        return False, names
    _, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    return not mismatch and not errors, names


def test_c9_cli_determinism(criterion, tmp_path, capsys):
    cfg = tmp_path / "tiny.json"
    cfg.write_text('{"d_model": 32, "n_heads": 2, "d_ff": 64, "n_layers": 1, "d_attn": 16, '
                   '"extractor_widths": [16, 32]}')
    for run in ("a", "b"):
        assert cli_main(["gen-dataset", "--count", "8", "--seed", "9", "--points", "256",
                         "--out", str(tmp_path / run / "data")]) == 0
        assert cli_main(["train", "--data", str(tmp_path / run / "data"), "--epochs", "3",
                         "--lr", "1e-3", "--batch", "4", "--beta", "2", "--seed", "9",
                         "--config", str(cfg), "--out", str(tmp_path / run / "model")]) == 0
    capsys.readouterr()
    data_ok, data_files = _same_tree(tmp_path / "a" / "data", tmp_path / "b" / "data")
    model_ok, model_files = _same_tree(tmp_path / "a" / "model", tmp_path / "b" / "model")
    ok = data_ok and model_ok
    criterion(9, ok, f"two gen-dataset + train runs bit-identical: dataset {data_ok} "
              f"({', '.join(data_files)}), model {model_ok} ({', '.join(model_files)})")
    assert ok
