"""Top-level acceptance gate: one test per shipped guarantee, each printing a
single PASS/FAIL line."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from gradcheck import directional_fd_errors
from strokenext.bench import count_flops, count_params
from strokenext.cli import main as cli_main
from strokenext.data import SplitSpec, generate_synthetic, split
from strokenext.encoder import ConvNeXtClassifier
from strokenext.fusion import Merge, ModelConfig, SumFusion, build_model, stack_pair
from strokenext.metrics import (PredictionRecord, auprc, auroc, basic_metrics,
                                brier, ece, evaluate, mcc,
                                read_prediction_log, report_from_records,
                                sens_spec, write_prediction_log)
from strokenext.stats import mcnemar
from strokenext.training import (AdamW, TrainConfig, _load_batch, smoothed_ce,
                                 train)

SCHEMA_DIR = Path(__file__).resolve().parents[1] / "docs" / "schemas"


@pytest.fixture
def announce(capfd, request):
    """Print one PASS/FAIL line per criterion, bypassing output capture."""
    label = request.node.name.removeprefix("test_")
    outcome = {"ok": False}
    yield outcome
    with capfd.disabled():
        print(f"[criterion] {label}: {'PASS' if outcome['ok'] else 'FAIL'}")


@pytest.fixture(scope="module")
def subtype_200(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc") / "subtype200"
    return generate_synthetic(200, "subtype", seed=11, out=root)


def test_1_mcnemar_exactness(announce):
    rows = [(87, 4, 73.890), (79, 3, 68.597), (67, 3, 56.700),
            (76, 3, 65.620), (69, 5, 53.635), (25, 1, 20.346),
            (40, 1, 35.219), (31, 1, 26.281), (29, 2, 21.807),
            (32, 1, 27.272), (37, 1, 32.236)]
    t0 = time.perf_counter()
    for b, c, expected in rows:
        r = mcnemar(b, c)
        assert abs(r.chi2 - expected) < 0.001, (b, c)
        assert r.p_value < 0.0001, (b, c)
    assert time.perf_counter() - t0 < 1.0
    announce["ok"] = True


def test_2_parameter_accounting(announce):
    t0 = time.perf_counter()
    single = {"tiny": 28e6, "small": 50e6, "base": 89e6, "large": 198e6}
    for variant, expected in single.items():
        with torch.device("meta"):
            model = ConvNeXtClassifier(variant, num_classes=1000)
        assert abs(count_params(model) - expected) / expected < 0.05, variant

    dual = {"tiny": 57.6e6, "small": 100.8e6, "base": 178.5e6, "large": 399.9e6}
    for variant, expected in dual.items():
        model = build_model(ModelConfig(variant=variant, num_classes=2, seed=0),
                            device="meta")
        assert abs(count_params(model) - expected) / expected < 0.05, variant
    assert time.perf_counter() - t0 < 30.0
    announce["ok"] = True


def test_3_flop_accounting(announce):
    shape = (1, 3, 224, 224)
    single = {"tiny": 4.5e9, "small": 8.7e9, "base": 15.4e9, "large": 34.4e9}
    for variant, expected in single.items():
        with torch.device("meta"):
            model = ConvNeXtClassifier(variant, num_classes=1000)
        assert abs(count_flops(model, shape) - expected) / expected < 0.10, variant

    dual = {"tiny": 8.977e9, "small": 17.474e9, "base": 30.853e9, "large": 68.940e9}
    for variant, expected in dual.items():
        model = build_model(ModelConfig(variant=variant, num_classes=2, seed=0),
                            device="meta")
        assert abs(count_flops(model, shape) - expected) / expected < 0.10, variant
    announce["ok"] = True


def test_4_gradient_correctness(announce):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    model = build_model(ModelConfig(variant="nano", dropout_rate=0.0, seed=0)).double()
    model.train()
    with torch.no_grad():  # move layer scales off near-zero init
        for name, p in model.named_parameters():
            if name.endswith("gamma"):
                p.fill_(0.5)
    x = torch.randn(2, 3, 32, 32, dtype=torch.float64)
    y = torch.tensor([0, 1])
    errs = directional_fd_errors(model, lambda: smoothed_ce(model(x), y))
    assert max(errs.values()) < 1e-4
    assert time.perf_counter() - t0 < 300.0
    announce["ok"] = True


def test_5_fusion_equivalence(announce):
    rng = np.random.default_rng(0)
    for draw in range(100):
        c = int(rng.integers(2, 33))
        torch.manual_seed(draw)
        m = Merge(c, identity_norm=True)
        f1, f2 = torch.randn(3, c), torch.randn(3, c)
        w = m.conv.weight
        dense = torch.cat((w[:, :, 0], w[:, :, 1]), dim=1)
        expected = torch.cat((f1, f2), dim=1) @ dense.T + m.conv.bias
        got = m.pre_activation(stack_pair(f1, f2))
        assert (got - expected).abs().max() < 1e-6

    s = SumFusion()
    f1, f2 = torch.randn(4, 16), torch.randn(4, 16)
    assert torch.equal(s(f1, f2), s(f2, f1))

    torch.manual_seed(0)
    m = Merge(16, identity_norm=True)
    assert (m(stack_pair(f1, f2)) - m(stack_pair(f2, f1))).abs().max() > 0
    announce["ok"] = True


def test_6_metric_oracles(announce):
    rng = np.random.default_rng(0)

    for _ in range(1000):  # AUROC vs brute-force pairwise counting
        n = int(rng.integers(2, 201))
        scores = np.round(rng.random(n), 2)
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        pos, neg = scores[labels == 1], scores[labels == 0]
        cmpm = pos[:, None] - neg[None, :]
        oracle = ((cmpm > 0).sum() + 0.5 * (cmpm == 0).sum()) / (len(pos) * len(neg))
        assert abs(auroc(scores, labels) - oracle) < 1e-9

    for _ in range(1000):  # AUPRC vs exhaustive threshold sweep
        n = int(rng.integers(2, 201))
        scores = np.round(rng.random(n), 2)
        labels = rng.integers(0, 2, n)
        if labels.sum() == 0:
            labels[0] = 1
        ap, prev = 0.0, 0.0
        for th in sorted(set(scores), reverse=True):
            sel = scores >= th
            tp, fp = int((labels[sel] == 1).sum()), int((labels[sel] == 0).sum())
            recall = tp / labels.sum()
            ap += (recall - prev) * tp / (tp + fp)
            prev = recall
        assert abs(auprc(scores, labels) - ap) < 1e-9

    for _ in range(1000):  # ECE vs an independent binning oracle
        n = int(rng.integers(1, 201))
        recs = [PredictionRecord.from_probs(f"s{i}", int(rng.integers(0, 2)),
                                            [1 - p, p])
                for i, p in enumerate(rng.random(n))]
        bins = {}
        for r in recs:
            conf = max(r.probs)
            bins.setdefault(min(14, math.ceil(conf * 15) - 1), []).append(r)
        oracle = sum(len(g) / n * abs(sum(r.pred_label == r.true_label for r in g) / len(g)
                                      - sum(max(r.probs) for r in g) / len(g))
                     for g in bins.values())
        assert abs(ece(recs) - oracle) < 1e-9

    for _ in range(1000):  # MCC / accuracy / weighted F1 vs formula evaluation
        tn, fp, fn, tp = (int(v) for v in rng.integers(0, 50, 4))
        if tn + fp + fn + tp == 0:
            tp = 1
        cm = [[tn, fp], [fn, tp]]
        n = tn + fp + fn + tp
        denom = math.sqrt(max((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn), 0))
        mcc_oracle = 0.0 if denom == 0 else (tp * tn - fp * fn) / denom
        m = basic_metrics(cm)
        assert abs(mcc(cm) - mcc_oracle) < 1e-9
        assert abs(m["accuracy"] - (tn + tp) / n) < 1e-9

        f1s, weights = [], []
        for pos_tp, pos_fp, pos_fn, support in (
                (tn, fn, fp, tn + fp), (tp, fp, fn, fn + tp)):
            prec = pos_tp / (pos_tp + pos_fp) if pos_tp + pos_fp else 0.0
            rec = pos_tp / (pos_tp + pos_fn) if pos_tp + pos_fn else 0.0
            f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
            weights.append(support / n)
        assert abs(m["f1"] - sum(w * f for w, f in zip(weights, f1s))) < 1e-9
        assert abs(m["recall"] - m["accuracy"]) < 1e-12  # weighted recall identity

        if tn + fp and fn + tp:  # sensitivity/specificity cross-symmetry
            per = sens_spec(cm)
            assert per[0]["sensitivity"] == per[1]["specificity"]
            assert per[1]["sensitivity"] == per[0]["specificity"]
    announce["ok"] = True


def test_7_end_to_end_desk_scale(announce, subtype_200):
    # 6 epochs at 64x64 (well inside the 20-epoch budget) must clear 0.95
    # test accuracy on the 200-per-class synthetic subtype dataset
    tr, va, te = split(subtype_200, SplitSpec(seed=11))
    model = build_model(ModelConfig(variant="nano", num_classes=2, seed=0))
    cfg = TrainConfig(epochs=6, batch_size=16, lr=1e-3, seed=0)
    best, history = train(model, tr, va, cfg, image_size=64, split_seed=11)
    assert len(history) <= 20
    model.load_state_dict(best.model_state)
    report, _ = evaluate(model, te, batch_size=32, image_size=64)
    assert report["accuracy"] >= 0.95, report["accuracy"]

    # 64-image memorization: 100% training accuracy within 200 optimizer steps
    memo = generate_synthetic(32, "subtype", seed=21,
                              out=subtype_200.samples[0].path.parents[2] / "memo64")
    x, y = _load_batch(memo, range(64), None, 0, 0, 64)
    model = build_model(ModelConfig(variant="nano", num_classes=2,
                                    dropout_rate=0.0, seed=1))
    opt = AdamW(model, lr=1e-3, weight_decay=0.0)
    steps, memorized = 0, False
    while steps < 200 and not memorized:
        model.train()
        for s in range(0, 64, 16):
            opt.zero_grad()
            smoothed_ce(model(x[s:s + 16]), y[s:s + 16]).backward()
            opt.step()
            steps += 1
        model.eval()
        with torch.no_grad():
            memorized = bool((model(x).argmax(1) == y).all())
    assert memorized, f"not memorized after {steps} steps"
    announce["ok"] = True


def test_8_determinism(announce, tmp_path, subtype_200):
    # splits
    a = split(subtype_200, SplitSpec(seed=4))
    b = split(subtype_200, SplitSpec(seed=4))
    for pa, pb in zip(a, b):
        assert [s.path for s in pa.samples] == [s.path for s in pb.samples]

    # synthetic datasets, byte for byte
    for name in ("g1", "g2"):
        generate_synthetic(3, "presence", seed=9, out=tmp_path / name)
    for f in sorted((tmp_path / "g1").rglob("*")):
        if f.is_file():
            twin = tmp_path / "g2" / f.relative_to(tmp_path / "g1")
            assert f.read_bytes() == twin.read_bytes(), f.name

    # training histories and prediction logs
    small = generate_synthetic(8, "subtype", seed=2, out=tmp_path / "small")
    tr, va, te = split(small, SplitSpec(seed=2))
    cfg = TrainConfig(epochs=2, batch_size=8, lr=1e-4, seed=3)

    def run():
        model = build_model(ModelConfig(variant="nano", num_classes=2, seed=3))
        best, history = train(model, tr, va, cfg, image_size=64, split_seed=2)
        model.load_state_dict(best.model_state)
        _, records = evaluate(model, te, batch_size=8, image_size=64)
        return history, records

    h1, r1 = run()
    h2, r2 = run()
    assert h1 == h2
    assert r1 == r2
    announce["ok"] = True


def test_9_cli_contract(announce, tmp_path):
    from jsonschema import Draft202012Validator

    def run(argv):
        try:
            return cli_main(argv)
        except SystemExit as e:
            return e.code

    def validate(path, schema_name):
        payload = json.loads(Path(path).read_text())
        schema = json.loads((SCHEMA_DIR / f"{schema_name}-1.schema.json").read_text())
        Draft202012Validator(schema).validate(payload)
        return payload

    data, ckpt = tmp_path / "data", tmp_path / "model.ckpt"
    report, log = tmp_path / "report.json", tmp_path / "preds.csv"

    assert run(["synth", "--out", str(data), "--task", "subtype",
                "--n-per-class", "10", "--seed", "3"]) == 0
    validate(data.parent / "data.run.json", "run_manifest")

    assert run(["train", "--data", str(data), "--task", "subtype",
                "--variant", "nano", "--epochs", "1", "--batch-size", "8",
                "--image-size", "64", "--out", str(ckpt)]) == 0
    validate(tmp_path / "model.history.json", "train_history")
    validate(tmp_path / "model.ckpt.run.json", "run_manifest")

    assert run(["evaluate", "--ckpt", str(ckpt), "--data", str(data),
                "--split", "test", "--batch-size", "8", "--image-size", "64",
                "--report", str(report), "--log", str(log)]) == 0
    payload = validate(report, "eval_report")

    # the JSON report recomputed from its own CSV log is field-identical
    recomputed = report_from_records(read_prediction_log(log),
                                     positive_label=payload["positive_label"])
    for key, value in recomputed.items():
        got = payload[key]
        if key == "per_class":
            got = [{k: v for k, v in d.items() if k != "class"} for d in got]
        assert got == value, key

    cmp_out = tmp_path / "cmp.json"
    assert run(["compare", "--log-a", str(log), "--log-b", str(log),
                "--out", str(cmp_out)]) == 0
    validate(cmp_out, "mcnemar")

    bench_out = tmp_path / "bench.json"
    assert run(["bench", "--variant", "nano", "--image-size", "64",
                "--warmup", "1", "--trials", "3", "--out", str(bench_out)]) == 0
    validate(bench_out, "bench_report")

    # documented exit codes
    assert run(["synth"]) == 2  # missing required flag
    assert run(["evaluate", "--ckpt", str(ckpt), "--data", str(tmp_path / "nope"),
                "--report", str(report), "--log", str(log)]) == 3
    truncated = tmp_path / "short.csv"
    lines = log.read_text().splitlines(keepends=True)
    truncated.write_text("".join(lines[:-1]))
    assert run(["compare", "--log-a", str(log), "--log-b", str(truncated),
                "--out", str(cmp_out)]) == 6
    announce["ok"] = True
