"""Exit criteria for the package, one test per criterion.

Each test is tagged with ``@pytest.mark.acceptance(n, title)``; the terminal
summary prints a PASS/FAIL line per criterion (see ``conftest.py``).
"""

import json
import math
import time

import numpy as np
import pytest
import torch
import yaml

from aigcvqa import cli, pipeline
from aigcvqa.config import RunConfig
from aigcvqa.crop_training import make_scene, train_crop_head
from aigcvqa.cropper import (
    CropConfig,
    S2CNet,
    StubDetector,
    adjacency,
    build_graph_inputs,
    detect_objects,
    feature_aggregation_gate,
    graph_self_attention,
    score_candidates,
    select_best_crop,
)
from aigcvqa.data_io import generate_synthetic_dataset, score_sigma
from aigcvqa.fgm import FgmConfig, compute_perturbation, fgm_step
from aigcvqa.losses import LossError, MIN_SIGMA, fcl_loss, gaussian_labels
from aigcvqa.metrics import krocc, plcc, srocc
from aigcvqa.quality_model import decode_frame_scores

from oracles import (
    adjacency_loop,
    as_lists,
    attention_loop,
    central_jacobian,
    fag_loop,
    kendall_tau_b_pairs,
    pearson_two_pass,
    rel_error,
    spearman_loop,
)


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


def frame_distribution(score):
    """A [100] probability row whose decoded score is exactly ``score`` (unit scale, 0..0.99)."""
    pos = score * 100.0
    lo = min(int(math.floor(pos)), 98)
    w = pos - lo
    p = torch.zeros(100, dtype=torch.float64)
    p[lo] = 1.0 - w
    p[lo + 1] = w
    return p


@pytest.mark.acceptance(1, "FCL vanishes for any frame spread when the mean hits the target")
def test_fcl_fairness():
    rng = np.random.default_rng(0)
    with Timer() as t:
        for _ in range(100):
            target = float(rng.uniform(0.2, 0.8))
            spread = float(rng.uniform(0.05, 0.19))
            offsets = np.array([-1.0, 1.0, -0.5, 0.5, 0.0, -1.0, 1.0, 0.0]) * spread
            varied = torch.stack([frame_distribution(target + o) for o in offsets])
            flat = torch.stack([frame_distribution(target)] * len(offsets))
            decoded = decode_frame_scores(varied)
            assert decoded.std() > 0.03
            assert abs(decoded.mean().item() - target) < 1e-12
            for probs in (varied, flat):
                out = fcl_loss(probs, 100.0 * target, sigma=5.0)
                assert abs(out.fcl.item()) < 1e-9
                assert out.bce.item() > 0
    assert t.elapsed < 5


@pytest.mark.acceptance(2, "Gradients match central finite differences")
def test_gradient_checks():
    with Timer() as t:
        for seed in range(20):
            g = torch.Generator().manual_seed(seed)

            def rnd(*shape, lo=-1.0, hi=1.0):
                return torch.rand(*shape, generator=g, dtype=torch.float64) * (hi - lo) + lo

            logits = rnd(3, 100, lo=-3, hi=3)
            y = float(torch.rand(1, generator=g)) * 90 + 5

            def fcl(z):
                return fcl_loss(torch.sigmoid(z), y, sigma=8.0).fcl

            def decode(z):
                return decode_frame_scores(torch.sigmoid(z))

            ma, mp = rnd(4, 4, lo=0.2, hi=1.0), rnd(4, 4, lo=0.0, hi=1.0)
            x, z = rnd(4, 5), rnd(4, 5)
            a = adjacency(ma, mp)

            def adj(m):
                return adjacency(m, mp)

            def fag(f):
                return feature_aggregation_gate(a, f, z)

            def att(f):
                return graph_self_attention(f * 0.7, f, ma, mp)

            cfg = CropConfig(feature_dim=8, top_n=3, seed=seed)
            net = S2CNet(cfg)
            image = np.random.default_rng(seed).random((32, 40, 3))
            det = detect_objects(image, StubDetector([(2, 2, 12, 14), (20, 5, 36, 25)], dim=8), cfg.top_n)
            inputs = build_graph_inputs(image, [(0, 0, 24, 24), (10, 4, 40, 32)], det, StubDetector(dim=8))

            def scores(f):
                return net(f, inputs.centers)

            for fn, arg in ((fcl, logits), (decode, logits), (adj, ma), (fag, x), (att, x), (scores, inputs.features)):
                analytic = torch.autograd.functional.jacobian(fn, arg).reshape(-1, arg.numel())
                assert rel_error(analytic, central_jacobian(fn, arg)) < 1e-4, fn.__name__
    assert t.elapsed < 60


@pytest.mark.acceptance(3, "FGM with zero epsilon equals the clean two-pass step; golden trace")
def test_fgm_degeneracy():
    with Timer() as t:
        torch.manual_seed(0)
        net = torch.nn.Sequential(torch.nn.Linear(4, 6), torch.nn.Tanh(), torch.nn.Linear(6, 1)).double()
        x = torch.randn(10, 4, dtype=torch.float64)
        y = torch.randn(10, dtype=torch.float64)

        def loss_fn(model, batch):
            return ((model(batch[0]).squeeze(-1) - batch[1]) ** 2).mean()

        params = dict(net.named_parameters())
        grads = torch.autograd.grad(loss_fn(net, (x, y)), list(params.values()))
        expected = {n: p.detach() - 0.05 * 2 * g for (n, p), g in zip(params.items(), grads)}
        fgm_step(net, (x, y), loss_fn, FgmConfig(epsilon=0.0, learning_rate=0.05, exclude=[]))
        for n, p in net.named_parameters():
            assert (p - expected[n]).abs().max().item() < 1e-7

        class Scalar(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.w = torch.nn.Parameter(torch.tensor(0.0, dtype=torch.float64))

        m = Scalar()
        fgm_step(m, None, lambda mod, _: (mod.w - 1.0) ** 2, FgmConfig(epsilon=0.1, learning_rate=0.1, include=["w"], exclude=[]))
        assert m.w.item() == pytest.approx(0.42, abs=1e-15)
    assert t.elapsed < 5


@pytest.mark.acceptance(4, "Per-tensor perturbation norm equals epsilon")
def test_fgm_norm_contract():
    rng = np.random.default_rng(0)
    for _ in range(100):
        eps = float(rng.uniform(1e-3, 1.0))
        grads = {f"t{i}": torch.from_numpy(rng.normal(size=tuple(rng.integers(1, 6, size=2))) * 10 ** rng.uniform(-6, 3)) for i in range(4)}
        grads["zero"] = torch.zeros(3, dtype=torch.float64)
        deltas = compute_perturbation(grads, eps)
        for name, d in deltas.items():
            if name == "zero":
                assert torch.all(d == 0)
            else:
                assert abs(torch.linalg.vector_norm(d).item() - eps) <= 1e-9 * eps


@pytest.mark.acceptance(5, "Graph ops and metrics match naive loop oracles")
def test_oracle_equivalence():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 5))
        d = int(rng.integers(1, 6))
        ma = torch.from_numpy(rng.uniform(0.05, 1.0, (n, n)))
        mp = torch.from_numpy(rng.uniform(0.0, 2.0, (n, n)))
        sign = int(rng.choice([1, -1]))
        a = adjacency(ma, mp, sign)
        assert np.allclose(as_lists(a), adjacency_loop(as_lists(ma), as_lists(mp), sign), atol=1e-8, rtol=0)
        x = torch.from_numpy(rng.normal(size=(n, d)))
        z = torch.from_numpy(rng.normal(size=(n, d)))
        assert np.allclose(as_lists(feature_aggregation_gate(a, x, z)), fag_loop(as_lists(a), as_lists(x), as_lists(z)), atol=1e-8, rtol=0)
        q = torch.from_numpy(rng.normal(size=(n, d)))
        out = graph_self_attention(q, x, ma, mp)
        assert np.allclose(as_lists(out), attention_loop(as_lists(q), as_lists(x), as_lists(x), as_lists(ma), as_lists(mp)), atol=1e-8, rtol=0)

        m = int(rng.integers(2, 51))
        xs = rng.integers(0, 15, m).astype(float) if rng.random() < 0.5 else rng.normal(size=m)
        ys = rng.normal(size=m)
        if np.all(xs == xs[0]):
            xs[0] += 1
        assert abs(plcc(xs, ys) - pearson_two_pass(xs, ys)) < 1e-9
        assert abs(srocc(xs, ys) - spearman_loop(xs, ys)) < 1e-9
        assert abs(krocc(xs, ys) - kendall_tau_b_pairs(xs, ys)) < 1e-9


@pytest.mark.acceptance(6, "Known metric values")
def test_known_metric_values():
    assert srocc([1, 2, 3], [10, 20, 15]) == 0.5
    assert krocc([1, 2, 3], [10, 20, 15]) == 1 / 3
    x = np.linspace(-3, 7, 40)
    assert abs(plcc(x, 2.5 * x + 1) - 1.0) < 1e-12
    assert abs(plcc(x, -0.3 * x + 4) + 1.0) < 1e-12


@pytest.mark.acceptance(7, "Desk-scale end to end on planted synthetic data")
def test_desk_scale_end_to_end():
    with Timer() as t:
        cfg = RunConfig(seed=0)
        ds = generate_synthetic_dataset(250, seed=0, test_fraction=0.2)
        train_e = [e for e in ds.manifest if e.split == "train"]
        test_e = [e for e in ds.manifest if e.split == "test"]
        assert (len(train_e), len(test_e)) == (200, 50)
        train_s = [ds.sample(e, cfg.model.frame_count) for e in train_e]
        test_s = [ds.sample(e, cfg.model.frame_count) for e in test_e]
        train_f = pipeline.video_features(train_s, cfg)
        test_f = pipeline.video_features(test_s, cfg)
        targets = [s.mos_hundred for s in train_s]
        sigma = score_sigma(targets)
        assert cfg.train.epochs == 5 and cfg.train.fgm and cfg.loss.mode == "fcl"
        result = pipeline.fit(cfg, train_f, targets, sigma)
        initial = pipeline.initial_loss(cfg, train_f, targets, sigma)
        final = pipeline.evaluate_loss(result.model, train_f, targets, sigma)
        held_out = srocc(pipeline.predict_unit(result.model, test_f), [s.mos_hundred for s in test_s])
        print(f"held-out SROCC {held_out:.4f}; training fcl {initial:.5f} -> {final:.5f}")
    assert held_out >= 0.8
    assert final < 0.5 * initial
    assert t.elapsed < 300


@pytest.mark.acceptance(8, "Gaussian soft labels match closed forms")
def test_gaussian_label_closed_forms():
    for sigma in (0.5, 1.0, 3.7, 12.0, 40.0):
        for y in (0.0, 17.0, 50.0, 99.0):
            labels = gaussian_labels(y, sigma).labels[0]
            peak = 1.0 / (sigma * math.sqrt(2 * math.pi))
            assert abs(labels[int(y)].item() - peak) < 1e-9
            for k in (1, 2, 5):
                expected = peak * math.exp(-(k**2) / (2 * sigma**2))
                for b in (int(y) - k, int(y) + k):
                    if 0 <= b < 100:
                        assert abs(labels[b].item() - expected) < 1e-9
    for bad in (MIN_SIGMA, 0.3, 0.0, -1.0):
        with pytest.raises(LossError):
            gaussian_labels(50.0, bad)


@pytest.mark.acceptance(9, "Crop pipeline finds the planted salient region")
def test_crop_pipeline():
    hits = 0
    for trial in range(20):
        cfg = CropConfig(seed=trial)
        net = train_crop_head(cfg, n_scenes=50, epochs=20, seed=trial)
        scene = make_scene(np.random.default_rng(10_000 + trial), dim=cfg.feature_dim, seed=cfg.seed)
        scored = score_candidates(scene.image, scene.candidates, scene.detector, net)
        hits += int(select_best_crop(scored).index == int(np.argmax(scene.targets)))
        det = detect_objects(scene.image, scene.detector, cfg.top_n)
        inputs = build_graph_inputs(scene.image, scene.candidates, det, scene.detector)
        with torch.no_grad():
            _, _, a = net.graph(inputs.features, inputs.centers)
        assert torch.allclose(a.sum(-1), torch.ones(a.shape[:-1], dtype=torch.float64), atol=1e-6)
    print(f"salient candidate selected in {hits}/20 trials")
    assert hits >= 18


@pytest.mark.acceptance(10, "Repeated runs give byte-identical logs and reports")
def test_determinism(tmp_path):
    cfg = {
        "seed": 3,
        "model": {"frame_count": 4},
        "data": {"source": "synthetic", "synthetic": {"n_train": 20, "n_test": 6, "n_frames": 5, "size": 16}},
        "crop": {"enabled": True, "pretrain_scenes": 6, "pretrain_epochs": 2},
        "train": {"epochs": 2},
    }
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    image = tmp_path / "img.npy"
    np.save(image, np.random.default_rng(1).random((20, 28, 3)))

    def run(tag):
        out = tmp_path / tag
        assert cli.main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        manifest = out / "synthetic" / "manifest.csv"
        assert cli.main(["eval", "--checkpoint", str(out / "checkpoint.pt"), "--manifest", str(manifest),
                         "--split", "test", "--out", str(out / "report.json"), "--predictions", str(out / "preds.jsonl")]) == 0
        assert cli.main(["metrics", "--predictions", str(out / "preds.jsonl"), "--manifest", str(manifest),
                         "--config", str(cfg_path), "--out", str(out / "metrics.json")]) == 0
        assert cli.main(["crop", str(image), "--config", str(cfg_path), "--out", str(out / "crop.json")]) == 0
        names = ("train_log.jsonl", "summary.json", "resolved_config.json", "preds.jsonl", "metrics.json", "crop.json")
        files = {n: (out / n).read_bytes() for n in names}
        report = json.loads((out / "report.json").read_text())
        report.pop("checkpoint")
        files["report.json"] = json.dumps(report, sort_keys=True).encode()
        return files

    first, second = run("a"), run("b")
    for name in first:
        assert first[name] == second[name], name
