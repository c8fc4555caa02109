import csv
import math

import numpy as np
import pytest

from p2cad import cad_lang as cl
from p2cad import network as nw
from p2cad import trainer as tr
from p2cad.autodiff import Tensor
from p2cad.errors import BadSpec, Diverged, FormatError


@pytest.fixture(scope="module")
def small_ds():
    return tr.generate_dataset(tr.DatasetSpec(count=6, seed=3, n_points=128))


def _random_logit_prediction(rng, b, n=60):
    cl_ = rng.normal(size=(b, n, 6)) * 3
    pl = rng.normal(size=(b, n, 16, 257)) * 3
    e = np.exp(cl_ - cl_.max(-1, keepdims=True))
    ep = np.exp(pl - pl.max(-1, keepdims=True))
    return nw.Prediction(e / e.sum(-1, keepdims=True), ep / ep.sum(-1, keepdims=True),
                         Tensor(cl_), Tensor(pl))


def _loss_oracle(cmd_logits, param_logits, target, beta):
    """Scalar loops over samples, positions and slots."""
    def nll(row, t):
        m = max(row)
        return m + math.log(sum(math.exp(v - m) for v in row)) - row[t]

    b_count = len(target)
    lc = lp = 0.0
    for b in range(b_count):
        for i in range(target.shape[1]):
            lc += nll(cmd_logits[b, i], target[b, i, 0])
            for j in range(16):
                lp += nll(param_logits[b, i, j], target[b, i, 1 + j])
    lc, lp = lc / b_count, lp / b_count
    return lc, lp, lc + beta * lp


def test_loss_matches_scalar_oracle(random_sequences):
    rng = np.random.default_rng(0)
    for trial in range(3):
        pred = _random_logit_prediction(rng, 2)
        target = np.stack([cl.to_token_matrix(s) for s in random_sequences[2 * trial:2 * trial + 2]])
        rep = tr.loss(pred, target, beta=2.0)
        lc, lp, total = _loss_oracle(pred.cmd_logits.data, pred.param_logits.data, target, 2.0)
        assert abs(rep.loss_cmd - lc) < 1e-10
        assert abs(rep.loss_param - lp) < 1e-10
        assert abs(rep.loss - total) < 1e-10 * max(1.0, abs(total))
        # probability path agrees with the logit path
        prob = tr.loss(nw.Prediction(pred.cmd, pred.param), target, beta=2.0)
        assert abs(prob.loss - rep.loss) < 1e-8 * rep.loss


def _acc_oracle(pred, gt, eta):
    n_cmd = n_ok = hits = k = 0
    for p, g in zip(pred, gt):
        for i in range(60):
            n_cmd += 1
            n_ok += p[i, 0] == g[i, 0]
            if p[i, 0] != g[i, 0]:
                continue
            for j in range(16):
                if cl.ARITY_MASK[g[i, 0]][j]:
                    k += 1
                    hits += abs(int(p[i, 1 + j]) - int(g[i, 1 + j])) < eta
    return n_ok / n_cmd, (hits / k if k else 1.0)


def test_accuracies_match_recount(random_sequences):
    rng = np.random.default_rng(1)
    for trial in range(20):
        gt = np.stack([cl.to_token_matrix(s) for s in random_sequences[trial * 3:trial * 3 + 3]])
        pred = gt.copy()
        flip = rng.random(pred.shape[:2]) < 0.3
        pred[..., 0][flip] = rng.integers(0, 6, flip.sum())
        pred[..., 1:] += rng.integers(-5, 6, pred[..., 1:].shape)
        a_cmd, a_par = _acc_oracle(pred, gt, 3)
        assert tr.acc_cmd(pred, gt) == a_cmd
        assert tr.acc_param(pred, gt, 3) == a_par


def test_acc_param_examples():
    gt = cl.to_token_matrix(cl.CadSequence((cl.sol(), cl.circle(0, 0, 0.5), cl.ext(0.5, -0.5),
                                            cl.eos())))
    pred = gt.copy()
    pred[1, 1] += 2      # within eta=3
    pred[1, 2] += 3      # not strictly within
    assert tr.param_hits(pred, gt, 3) == (13, 14)
    assert tr.acc_param(np.zeros_like(gt), gt) == 1.0   # nothing evaluated


def test_evaluate_ground_truth_fixed_point(small_ds):
    rep = tr.evaluate_predictions(small_ds.tokens, small_ds)
    assert (rep.acc_cmd, rep.acc_param, rep.cd_median, rep.invalid_ratio) == (1.0, 1.0, 0.0, 0.0)
    assert rep.n_params_evaluated > 0


def test_evaluate_counts_invalid(small_ds):
    pred = small_ds.tokens.copy()
    pred[0, :, 0] = cl.CommandType.SOL
    rep = tr.evaluate_predictions(pred, small_ds)
    assert rep.n_invalid == 1 and rep.invalid_ratio == 1 / 6
    assert rep.cds[0] is None and rep.cd_median == 0.0


def test_dataset_spec_validation():
    with pytest.raises(BadSpec):
        tr.DatasetSpec(curves=(2, 4))
    with pytest.raises(BadSpec):
        tr.DatasetSpec(groups=(3, 2))
    with pytest.raises(BadSpec):
        tr.DatasetSpec(groups=(1, 5), loops=(1, 3), curves=(3, 6))
    with pytest.raises(BadSpec):
        tr.DatasetSpec(count=0)


def test_generation_is_deterministic_and_valid():
    spec = tr.DatasetSpec(count=4, seed=7, n_points=256)
    a, b = tr.generate_dataset(spec), tr.generate_dataset(spec)
    assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.clouds, b.clouds)
    assert a.cloud_seeds == b.cloud_seeds
    for tokens, pc in a:
        assert cl.validate_syntax(tokens).ok
        assert np.isclose(np.abs(pc.points).max(), 1.0, atol=1e-6)
    c = tr.generate_dataset(tr.DatasetSpec(count=4, seed=8, n_points=256))
    assert not np.array_equal(a.tokens, c.tokens)


def test_generation_thread_count_does_not_matter():
    spec = tr.DatasetSpec(count=5, seed=2, n_points=64)
    a, b = tr.generate_dataset(spec, workers=1), tr.generate_dataset(spec, workers=3)
    assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.clouds, b.clouds)


def test_dataset_round_trip(tmp_path, small_ds):
    tr.save_dataset(small_ds, tmp_path / "ds")
    back = tr.load_dataset(tmp_path / "ds")
    assert np.array_equal(back.tokens, small_ds.tokens)
    assert np.array_equal(back.clouds, small_ds.clouds)
    assert back.cloud_seeds == small_ds.cloud_seeds and back.spec == small_ds.spec
    (tmp_path / "ds" / "manifest.json").write_text("{")
    with pytest.raises(FormatError):
        tr.load_dataset(tmp_path / "ds")


def test_subset(small_ds):
    sub = small_ds.subset([4, 1])
    assert np.array_equal(sub.tokens[0], small_ds.tokens[4])
    assert sub.cloud_seeds == [small_ds.cloud_seeds[4], small_ds.cloud_seeds[1]]


def _tiny_params(seed=0):
    return nw.NetworkParams.init(nw.tiny_config(n_seq=60), seed)


def test_zero_lr_leaves_params(small_ds):
    params = _tiny_params()
    before = {k: v.copy() for k, v in params.arrays().items()}
    tr.train(params, small_ds, epochs=1, lr=0.0, batch=3, log_every=0)
    assert all(np.array_equal(before[k], v) for k, v in params.arrays().items())


def test_training_is_deterministic(tmp_path, small_ds):
    runs = []
    for name in ("a", "b"):
        params = _tiny_params()
        r = tr.train(params, small_ds, epochs=2, lr=1e-3, batch=4, seed=5,
                     out_dir=tmp_path / name, log_every=0)
        runs.append(r)
    assert runs[0].curve == runs[1].curve and runs[0].steps == 4
    for f in ("last.p2ck", "loss.csv", "config.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    with open(tmp_path / "a" / "loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss", "loss_cmd", "loss_param"] and len(rows) == 5


def test_training_lowers_loss(small_ds):
    params = _tiny_params()
    r = tr.train(params, small_ds, epochs=30, lr=3e-3, batch=6, log_every=0)
    first = np.mean([c[1] for c in r.curve[:3]])
    last = np.mean([c[1] for c in r.curve[-3:]])
    assert last < first


def test_callback_and_max_steps(small_ds):
    seen = []
    tr.train(_tiny_params(), small_ds, epochs=10, lr=1e-3, batch=2, max_steps=5,
             log_every=0, callback=lambda s, p: seen.append(s))
    assert seen == [1, 2, 3, 4, 5]


def test_diverged_keeps_curve(tmp_path, small_ds):
    params = _tiny_params()
    params["extractor.w3"].data[...] = 1e300
    with pytest.raises(Diverged):
        with np.errstate(all="ignore"):
            tr.train(params, small_ds, epochs=1, lr=1e-3, batch=3, out_dir=tmp_path, log_every=0)
    assert (tmp_path / "loss.csv").read_text().startswith("step,loss")


def test_worker_count(monkeypatch):
    monkeypatch.setenv("P2CAD_THREADS", "3")
    assert tr.worker_count() == 3
    monkeypatch.setenv("P2CAD_THREADS", "junk")
    assert tr.worker_count() == 1
    monkeypatch.delenv("P2CAD_THREADS")
    assert tr.worker_count(2) == 2
