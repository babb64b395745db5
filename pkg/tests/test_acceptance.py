"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines and runtimes. Criterion 7 trains two full models and is the long pole
(about a quarter hour); everything else finishes in seconds to a couple of
minutes.
"""

import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from stgin import data as dt
from stgin import gat as gt
from stgin import graph as gr
from stgin import informer as inf
from stgin import model as md
from stgin import numerics as nm
from stgin import synth as sy
from stgin import train_eval as te
from stgin.informer import TopUPlan
from stgin.numerics import Tensor


def _verdict(number, label, ok, elapsed, bound_s, detail=""):
    status = "PASS" if ok else "FAIL"
    extra = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {number} {label}: {status} in {elapsed:.1f}s / {bound_s:.0f}s budget{extra}")
    assert ok, f"criterion {number} ({label}) failed: {detail}"
    assert elapsed < bound_s, f"criterion {number} exceeded its {bound_s:.0f}s budget ({elapsed:.1f}s)"


def pair_graph():
    return gr.build_adjacency(np.array([[0.0, 50.0], [50.0, 0.0]]), sigma=50.0, kappa=100.0)


def test_criterion_1_attention_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(200):
        l_q = int(rng.integers(1, 33))
        l_k = int(rng.integers(1, 33))
        d = int(rng.integers(1, 33))
        d_v = int(rng.integers(1, 33))
        q = rng.normal(size=(l_q, d))
        k = rng.normal(size=(l_k, d))
        v = rng.normal(size=(l_k, d_v))
        with nm.no_grad():
            sparse = inf.probsparse_attention(Tensor(q), Tensor(k), Tensor(v), u=l_q).data
            full = inf.full_attention(Tensor(q), Tensor(k), Tensor(v)).data
        worst = max(worst, float(np.abs(sparse - full).max()))
    _verdict(1, "probsparse(u=l_q) equals full attention", worst <= 1e-10,
             time.perf_counter() - start, 10.0, f"max |diff| = {worst:.2e}")


def test_criterion_2_sparsity_bound():
    start = time.perf_counter()
    rng = np.random.default_rng(102)
    ok = True
    for _ in range(200):
        l_q = int(rng.integers(1, 33))
        l_k = int(rng.integers(1, 33))
        d = int(rng.integers(1, 33))
        q = rng.normal(size=(l_q, d))
        k = rng.normal(size=(l_k, d))
        m_bar = inf.sparsity_measurement(q, k).m_bar.data
        # brute-force exact measurement: log-sum-exp of scaled scores minus their mean
        scores = (q @ k.T) / math.sqrt(d)
        peak = scores.max(axis=1)
        m_exact = peak + np.log(np.exp(scores - peak[:, None]).sum(axis=1)) - scores.mean(axis=1)
        ok &= bool(np.all(m_bar <= m_exact)) and bool(np.all(m_exact <= m_bar + math.log(l_k)))
    _verdict(2, "max-minus-mean brackets the exact measurement", ok,
             time.perf_counter() - start, 10.0)


def _op_grad_cases():
    rng = np.random.default_rng(103)

    def p(shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    def weighted(out_shape):
        w = Tensor(rng.normal(size=out_shape))
        return lambda out: nm.mean_all(nm.mul(out, w))

    cases = []
    a, b = p((3, 4)), p((4, 2))
    cases.append(("matmul", [a, b], lambda: nm.mean_all(nm.matmul(a, b))))
    xb, wb = p((5, 3)), p((4, 3, 2))
    cases.append(("matmul_batched", [xb, wb], lambda: nm.mean_all(nm.matmul(xb, wb))))
    x1, b1 = p((4, 3)), p((3,))
    cases.append(("add_broadcast", [x1, b1], lambda: nm.mean_all(nm.add(x1, b1))))
    x2, y2 = p((4, 3)), p((4, 3))
    cases.append(("sub_mul_neg", [x2, y2],
                  lambda: nm.mean_all(nm.mul(nm.sub(x2, y2), nm.neg(y2)))))
    xw, ww, bw = p((5, 3)), p((3, 4)), p((4,))
    fin = weighted((5, 4))
    cases.append(("linear", [xw, ww, bw], lambda: fin(nm.linear(xw, ww, bw))))
    xs = p((5, 7))
    fs = weighted((5, 7))
    cases.append(("softmax_rows", [xs], lambda: fs(nm.softmax_rows(xs))))
    xm = p((4, 4))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    fm = weighted((4, 4))
    cases.append(("softmax_rows_masked", [xm], lambda: fm(nm.softmax_rows(xm, mask=mask))))
    xl = p((6, 3))
    fl = weighted((6, 3))
    cases.append(("leaky_relu", [xl], lambda: fl(nm.leaky_relu(xl, 0.2))))
    xe = p((6, 3))
    fe = weighted((6, 3))
    cases.append(("elu", [xe], lambda: fe(nm.elu(xe))))
    xc, kc = p((6, 2)), p((3, 2, 3))
    fc = weighted((6, 3))
    cases.append(("conv1d_time", [xc, kc], lambda: fc(nm.conv1d_time(xc, kc))))
    xc3, kc3 = p((2, 6, 2)), p((3, 2, 3))
    fc3 = weighted((2, 6, 3))
    cases.append(("conv1d_time_batched", [xc3, kc3], lambda: fc3(nm.conv1d_time(xc3, kc3))))
    xp = p((8, 2))
    fp = weighted((4, 2))
    cases.append(("maxpool1d", [xp], lambda: fp(nm.maxpool1d(xp, 3, 2, 1))))
    xp3 = p((2, 8, 2))
    fp3 = weighted((2, 4, 2))
    cases.append(("maxpool1d_batched", [xp3], lambda: fp3(nm.maxpool1d(xp3, 3, 2, 1))))
    xn, gn, bn = p((4, 6)), p((6,)), p((6,))
    fn = weighted((4, 6))
    cases.append(("layer_norm", [xn, gn, bn], lambda: fn(nm.layer_norm(xn, gn, bn))))
    xt = p((2, 3, 4))
    ft = weighted((3, 8))
    cases.append(("permute_reshape", [xt],
                  lambda: ft(nm.reshape(nm.permute(xt, (1, 0, 2)), (3, 8)))))
    xr, yr = p((2, 3)), p((4, 3))
    fr = weighted((6, 3))
    cases.append(("concat", [xr, yr], lambda: fr(nm.concat([xr, yr], axis=0))))
    xst, yst = p((2, 3)), p((2, 3))
    fst = weighted((2, 2, 3))
    cases.append(("stack", [xst, yst], lambda: fst(nm.stack([xst, yst], axis=1))))
    xg = p((5, 4))
    fg = weighted((2, 4))
    cases.append(("getitem", [xg], lambda: fg(xg[1:3])))
    xm0 = p((3, 4, 2))
    fm0 = weighted((4, 2))
    cases.append(("mean_axis0", [xm0], lambda: fm0(nm.mean_axis0(xm0))))
    xt2 = p((3, 5))
    ft2 = weighted((5, 3))
    cases.append(("transpose", [xt2], lambda: ft2(nm.transpose(xt2))))

    qf, kf, vf = p((5, 3)), p((6, 3)), p((6, 2))
    ff = weighted((5, 2))
    cases.append(("full_attention", [qf, kf, vf], lambda: ff(inf.full_attention(qf, kf, vf))))
    qp, kp, vp = p((5, 3)), p((6, 3)), p((6, 2))
    top = inf.sparsity_measurement(qp.data, kp.data, u=2).top_u
    fps = weighted((5, 2))
    cases.append(("probsparse_frozen", [qp, kp, vp],
                  lambda: fps(inf.probsparse_attention(qp, kp, vp, u=2, top=top))))
    return cases


def test_criterion_3_gradient_oracle():
    start = time.perf_counter()
    failures = []
    for name, params, f in _op_grad_cases():
        report = nm.grad_check(f, params)
        if report.max_rel_error >= 1e-4:
            failures.append((name, report.max_rel_error))

    # composed stages: spatial layer, distilling, encoder, decoder
    rng = np.random.default_rng(104)
    layer = gt.GatLayer.init(rng, f_in=3, f_out=4, heads=2)
    g3 = gr.build_adjacency(
        np.abs(np.arange(3)[:, None] - np.arange(3)[None, :]) * 100.0, sigma=100.0, kappa=100.0
    )
    xg = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    tg = Tensor(rng.normal(size=(3, 4)))
    report = nm.grad_check(
        lambda: nm.mean_all(nm.mul(gt.gat_forward(xg, layer, g3), tg)),
        [xg] + [p for _, p in layer.parameters()],
    )
    if report.max_rel_error >= 1e-4:
        failures.append(("gat_forward", report.max_rel_error))

    unit = inf.InformerUnit.init(rng, d_in=3, d=4, heads=2, input_len=8, horizon=2,
                                 n_layers=3, n_replicas=1, ffn_mult=2)
    seq = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
    tu = Tensor(rng.normal(size=(2, 4)))
    plan = TopUPlan()
    with nm.no_grad():
        unit.forward(seq, plan)
    plan.start_replay()

    def f_unit():
        plan.rewind()
        return nm.mean_all(nm.mul(unit.forward(seq, plan), tu))

    report = nm.grad_check(f_unit, [seq] + [p for _, p in unit.parameters()])
    if report.max_rel_error >= 1e-4:
        failures.append(("informer_unit", report.max_rel_error))

    # end-to-end: 2-node model, forward + MSE, frozen selections
    dims = md.ModelDims(n_nodes=2, input_len=8, horizon=2, fca_channels=3, embed=4,
                        gat_heads=2, informer_heads=2, enc_layers=3, replicas=1, ffn_mult=2)
    model = md.init_params(dims, seed=104)
    window = Tensor(rng.normal(size=(8, 2)))
    target = Tensor(rng.normal(size=(2, 2)))
    graph = pair_graph()
    plan2 = TopUPlan()
    with nm.no_grad():
        model.forward(window, graph, plan=plan2)
    plan2.start_replay()

    def f_model():
        plan2.rewind()
        return te.mse_loss(model.forward(window, graph, plan=plan2).values, target)

    report = nm.grad_check(f_model, [p for _, p in model.parameters()])
    if report.max_rel_error >= 1e-4:
        failures.append(("stgin_end_to_end", report.max_rel_error))

    _verdict(3, "gradient oracle over every operation and the full model", not failures,
             time.perf_counter() - start, 120.0, f"failures: {failures}" if failures else "")


def test_criterion_4_normalization_and_locality():
    start = time.perf_counter()
    rng = np.random.default_rng(105)
    ok = True
    for _ in range(20):
        n = int(rng.integers(2, 12))
        d = rng.uniform(10.0, 400.0, size=(n, n))
        d = (d + d.T) / 2.0
        np.fill_diagonal(d, 0.0)
        graph = gr.build_adjacency(d, sigma=150.0, kappa=250.0)
        layer = gt.GatLayer.init(rng, f_in=4, f_out=3, heads=3)
        with nm.no_grad():
            alpha = gt.attention_coefficients(Tensor(rng.normal(size=(n, 4))), layer, graph).data
        ok &= bool(np.all(np.abs(alpha.sum(axis=2) - 1.0) <= 1e-10))
        ok &= bool(np.all(alpha >= 0.0))
        ok &= bool(np.all(alpha[:, ~graph.neighbor_mask] == 0.0))
    for _ in range(50):
        rows = rng.normal(scale=rng.uniform(0.5, 40.0), size=(int(rng.integers(1, 20)), int(rng.integers(1, 20))))
        with nm.no_grad():
            p = nm.softmax_rows(Tensor(rows)).data
        ok &= bool(np.all(np.abs(p.sum(axis=-1) - 1.0) <= 1e-10))
    dparams = inf.DistillParams.init(rng, 2)
    for length in range(2, 257, 2):
        with nm.no_grad():
            out = inf.distill(Tensor(rng.normal(size=(length, 2))), dparams)
        ok &= out.shape[0] == length // 2
    _verdict(4, "attention normalization, locality, distilling halves", ok,
             time.perf_counter() - start, 30.0)


def test_criterion_5_decoder_causality():
    start = time.perf_counter()
    rng = np.random.default_rng(106)
    ok = True
    for _ in range(100):
        length = int(rng.integers(2, 13))
        d_in = int(rng.integers(2, 6))
        heads = 2
        d = 2 * int(rng.integers(1, 4)) * heads // 2  # multiple of heads
        d = max(heads, (d // heads) * heads)
        params = inf.DecoderParams.init(rng, d_in, d, heads, length, ffn_mult=2,
                                        c_factor=float(rng.uniform(0.5, 6.0)))
        x = rng.normal(size=(length, d_in))
        i = int(rng.integers(0, length - 1))
        x_pert = x.copy()
        x_pert[i + 1:] += rng.normal(scale=rng.uniform(0.1, 5.0), size=x_pert[i + 1:].shape)
        with nm.no_grad():
            base = inf.decoder_layer1(Tensor(x), params).data
            pert = inf.decoder_layer1(Tensor(x_pert), params).data
        ok &= bool(np.array_equal(base[: i + 1], pert[: i + 1]))
    _verdict(5, "masked decoder attention is exactly causal", ok,
             time.perf_counter() - start, 30.0)


def test_criterion_6_overfit_sanity():
    start = time.perf_counter()
    scfg = sy.SynthConfig(n_nodes=2, days=1, seed=106, regional_std=2.0, noise_std=0.3)
    speeds, distances, _ = sy.generate(scfg)
    graph = gr.build_adjacency(distances, sigma=max(gr.sigma_from_distances(distances), 1.0),
                               kappa=float(distances.max()) + 1.0)
    ds = dt.normalize(dt.SpeedDataset(matrix=Tensor(speeds), name="overfit"), 1.0)
    windows = dt.sliding_windows(ds, 8, 2)[:8]  # one fixed batch, repeated every update
    dims = md.ModelDims(n_nodes=2, input_len=8, horizon=2, fca_channels=8, embed=8,
                        gat_heads=2, informer_heads=2, enc_layers=2, replicas=1, ffn_mult=2)
    model = md.init_params(dims, seed=6)
    cfg = te.TrainConfig(batch_size=8, heads=2, hidden_d=8, iterations=500,
                         learning_rate=1e-3, seed=6, input_len=8, horizon=2)
    _, trace = te.train(model, windows, graph, cfg)
    ratio = trace[-1] / trace[0]
    stable = all(
        trace[i + 50] <= trace[i] * 1.05 for i in range(100, len(trace) - 50)
    )
    ok = ratio < 0.1 and stable
    _verdict(6, "500 updates overfit a fixed batch", ok, time.perf_counter() - start, 300.0,
             f"loss {trace[0]:.5f} -> {trace[-1]:.5f} (ratio {ratio:.3f}), monotone-after-100 {stable}")


def _train_and_score(gat_enabled, train_w, test_w, graph, ds, seed):
    dims = md.ModelDims(n_nodes=ds.n_nodes, input_len=16, horizon=3, fca_channels=32,
                        embed=32, gat_heads=4, informer_heads=4, enc_layers=3, replicas=1,
                        gat_enabled=gat_enabled)
    model = md.init_params(dims, seed)
    cfg = te.TrainConfig(batch_size=32, heads=4, hidden_d=32, iterations=500,
                         learning_rate=3e-3, seed=seed, input_len=16, horizon=3)
    model, trace = te.train(model, train_w, graph, cfg)
    report = te.evaluate(model, test_w, graph, ds, [15])
    acc = [r.accuracy for r in report.rows if r.scale == "normalized"][0]
    return acc, trace


def _los_loop_paths():
    root = os.environ.get("STGIN_LOS_LOOP_DIR", "data/los-loop")
    speeds = Path(root) / "speeds.csv"
    adjacency = Path(root) / "adjacency.csv"
    if speeds.exists() and adjacency.exists():
        return speeds, adjacency
    return None


def test_criterion_7_directional_reproduction():
    start = time.perf_counter()
    scfg = sy.SynthConfig(n_nodes=20, days=14, seed=42)
    speeds, distances, _ = sy.generate(scfg)
    sigma = gr.sigma_from_distances(distances)
    kappa = gr.kappa_from_percentile(distances, 5.0)
    graph = gr.build_adjacency(distances, sigma=sigma, kappa=kappa)
    ds = dt.normalize(dt.SpeedDataset(matrix=Tensor(speeds), name="synthetic"), 0.8)
    windows = dt.sliding_windows(ds, 16, 3)
    train_w, test_w = dt.split_chronological(windows, 0.8)

    stgin_acc, _ = _train_and_score(True, train_w, test_w, graph, ds, seed=7)
    nogat_acc, _ = _train_and_score(False, train_w, test_w, graph, ds, seed=7)
    base = te.baselines(test_w, train_w, ds, [15])
    base_acc = {r.method: r.accuracy for r in base.rows if r.scale == "normalized"}

    ok = (
        stgin_acc >= 0.85
        and stgin_acc > base_acc["persistence"]
        and stgin_acc > base_acc["historical_average"]
        and stgin_acc > nogat_acc
    )
    detail = (
        f"stgin {stgin_acc:.4f} vs persistence {base_acc['persistence']:.4f}, "
        f"hist-avg {base_acc['historical_average']:.4f}, no-graph {nogat_acc:.4f}"
    )

    los = _los_loop_paths()
    if los is None:
        detail += "; Los-loop files absent, leg skipped"
    else:
        speeds_path, adj_path = los
        ds_l = dt.normalize(dt.interpolate_missing(dt.load_speed_csv(speeds_path, name="los-loop")), 0.8)
        graph_l = gr.load_prebuilt_adjacency(adj_path)
        windows_l = dt.sliding_windows(ds_l, 16, 3)
        train_l, test_l = dt.split_chronological(windows_l, 0.8)
        acc_l, _ = _train_and_score(True, train_l, test_l[:: max(len(test_l) // 400, 1)], graph_l, ds_l, seed=7)
        ok = ok and acc_l >= 0.85
        detail += f"; los-loop 15-min accuracy {acc_l:.4f}"

    _verdict(7, "trained model beats naive references and the no-graph ablation", ok,
             time.perf_counter() - start, 1800.0, detail)


def test_criterion_8_metric_formulas():
    start = time.perf_counter()
    rng = np.random.default_rng(108)
    ok = True
    for _ in range(100):
        m, n = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        y = rng.normal(size=(m, n)) + 2.0
        y_hat = rng.normal(size=(m, n)) + 2.0
        sq = sum((y[j, i] - y_hat[j, i]) ** 2 for j in range(m) for i in range(n))
        ab = sum(abs(y[j, i] - y_hat[j, i]) for j in range(m) for i in range(n))
        nrm = math.sqrt(sum(y[j, i] ** 2 for j in range(m) for i in range(n)))
        ok &= abs(te.rmse(y, y_hat) - math.sqrt(sq / (m * n))) <= 1e-12
        ok &= abs(te.mae(y, y_hat) - ab / (m * n)) <= 1e-12
        ok &= abs(te.accuracy(y, y_hat) - (1.0 - math.sqrt(sq) / nrm)) <= 1e-12
    y = np.array([3.0, 4.0])
    ok &= te.accuracy(y, y) == 1.0
    ok &= abs(te.accuracy(y, np.zeros(2))) <= 1e-15
    _verdict(8, "metric formulas match the elementwise oracle", ok,
             time.perf_counter() - start, 5.0)


def test_criterion_9_training_determinism(tmp_path):
    start = time.perf_counter()
    data_dir = tmp_path / "data"
    rc = subprocess.run(
        [sys.executable, "-m", "stgin.cli", "synth", "--out-dir", str(data_dir),
         "--seed", "11", "--nodes", "4", "--days", "2"],
        capture_output=True, text=True,
    )
    assert rc.returncode == 0, rc.stderr
    cfg = {
        "speeds": str(data_dir / "speeds.csv"),
        "distances": str(data_dir / "distances.csv"),
        "seed": 11,
        "input_len": 8,
        "horizon_steps": 3,
        "fca_channels": 8,
        "hidden_d": 8,
        "heads": 2,
        "gat_heads": 2,
        "enc_layers": 2,
        "replicas": 1,
        "ffn_mult": 2,
        "batch_size": 16,
        "iterations": 40,
        "learning_rate": 0.001,
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    blobs = []
    for tag in ("run1", "run2"):
        out = tmp_path / tag
        rc = subprocess.run(
            [sys.executable, "-m", "stgin.cli", "train", "--config", str(cfg_path),
             "--out-dir", str(out)],
            capture_output=True, text=True,
        )
        assert rc.returncode == 0, rc.stderr
        blobs.append(((out / "checkpoint.json").read_bytes(), (out / "loss_trace.csv").read_bytes()))
    ok = blobs[0][0] == blobs[1][0] and blobs[0][1] == blobs[1][1]
    _verdict(9, "identical seeds give byte-identical checkpoints and traces", ok,
             time.perf_counter() - start, 600.0)
