"""End-to-end acceptance gate.

Each test checks one release criterion and reports a single pass/fail line in
the terminal summary (see conftest.py). The benchmark-grid criteria share one
session-scoped set of trained models, so this module takes on the order of
half an hour; everything else in the suite is fast.
"""

import time

import numpy as np
import pytest

from gcnet import autodiff as ad
from gcnet import dataio, evaluation, model, training
from gcnet.autodiff import derive_seed
from gcnet.cli import main
from gcnet.convgraph import build_graph
from gcnet.dataio import MODALITIES, GeneratorConfig
from gcnet.evaluation import weighted_f1
from gcnet.model import GCNetConfig, init_params, rgcn_forward
from gcnet.training import TrainConfig, conversation_loss, train

BENCH_GEN_SEED = 100
BENCH_SEEDS = (1, 2, 3, 4, 5)
BENCH_LATENT = 16
BENCH_WINDOW = 2
BENCH_EPOCHS = 50


def bench_instance(length, d, classes, speakers, latent, window, eta, seed,
                   dropout=0.0):
    gen = GeneratorConfig(
        num_speakers=speakers, num_classes=classes,
        modality_dims={m: d for m in MODALITIES},
        conversations_per_split={"train": 1, "val": 0, "test": 0},
        length_range=(length, length), seed=seed)
    splits, _ = dataio.generate_synthetic(gen)
    conv = splits["train"].conversations[0]
    mask = dataio.apply_missing(splits["train"], eta, derive_seed(seed, "mask"))[0]
    config = GCNetConfig(latent_dim=latent, window=window,
                         modality_dims=dict(gen.modality_dims),
                         num_classes=classes, num_speakers=speakers,
                         dropout=dropout)
    params = init_params(config, derive_seed(seed, "init"))
    graph = build_graph(conv.speakers, window, speakers)
    return conv, mask, config, params, graph


def test_criterion_1_joint_loss_gradient_check(record_criterion):
    # full pipeline gradient vs central differences on a small instance
    started = time.time()
    conv, mask, config, params, graph = bench_instance(
        length=4, d=5, classes=3, speakers=2, latent=8, window=1,
        eta=0.3, seed=3)

    def loss_fn():
        loss, _, _ = conversation_loss(conv, mask, graph, config, params,
                                       training=False, rng=None)
        return loss

    report = ad.grad_check(loss_fn, params.values(), eps=1e-5, tol=1e-4)
    elapsed = time.time() - started
    name, err, _ = report.worst()
    record_criterion(
        1, "joint loss gradient matches finite differences (tol 1e-4)",
        report.passed and elapsed < 60.0,
        f"worst {err:.2e} on {name}, {elapsed:.1f}s")


def brute_force_rgcn(hidden, graph, family, weights):
    table = graph.neighbors_by_relation(family)
    out = np.zeros_like(hidden)
    for i in range(graph.length):
        for r, per_node in table.items():
            sources = per_node[i]
            for j in sources:
                out[i] += (1.0 / len(sources)) * hidden[j] @ weights[r].data
    return np.maximum(out, 0.0)


def test_criterion_2_rgcn_matches_brute_force(record_criterion):
    rng = np.random.default_rng(42)
    relation_counts = {"speaker": lambda s: s * s, "temporal": lambda s: 3,
                       "coupled": lambda s: 3 * s * s}
    worst = 0.0
    for trial in range(50):
        length = int(rng.integers(1, 7))
        window = int(rng.integers(1, 3))
        speakers = int(rng.integers(1, 4))
        width = int(rng.integers(1, 5))
        family = ("speaker", "temporal", "coupled")[trial % 3]
        graph = build_graph([int(s) for s in rng.integers(0, speakers, length)],
                            window, speakers)
        hidden = rng.standard_normal((length, width))
        weights = {r: ad.Param(f"w{r}", rng.standard_normal((width, width)))
                   for r in range(relation_counts[family](speakers))}
        got = rgcn_forward(ad.Tensor(hidden), graph, family, weights).data
        expected = brute_force_rgcn(hidden, graph, family, weights)
        worst = max(worst, float(np.abs(got - expected).max()))
    record_criterion(
        2, "graph convolution matches per-edge enumeration on 50 instances "
           "(tol 1e-10)",
        worst <= 1e-10, f"worst abs diff {worst:.2e}")


def test_criterion_3_reconstruction_loss_zero_when_complete(record_criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(20):
        conv, mask, config, params, graph = bench_instance(
            length=int(rng.integers(1, 6)), d=int(rng.integers(1, 5)),
            classes=int(rng.integers(2, 5)), speakers=int(rng.integers(1, 4)),
            latent=8, window=int(rng.integers(1, 3)), eta=0.0,
            seed=int(rng.integers(0, 10000)))
        _, _, rec = conversation_loss(conv, mask, graph, config, params,
                                      training=False, rng=None)
        worst = max(worst, abs(rec))
    record_criterion(
        3, "reconstruction loss is exactly zero with nothing missing "
           "(20 configurations)",
        worst == 0.0, f"max |loss| {worst:.2e}")


def test_criterion_4_missing_simulation(record_criterion):
    manifest = dataio.Manifest(num_modalities=3,
                               modality_dims={m: 2 for m in MODALITIES},
                               num_classes=2, num_speakers=2)
    ds = dataio.Dataset(manifest=manifest)
    rng = np.random.default_rng(0)
    for k in range(150):  # 150 x 10 utterances x 3 modalities = 4500 slots
        ds.conversations.append(dataio.Conversation(
            id=f"c{k}", speakers=[i % 2 for i in range(10)],
            labels=[0] * 10,
            features={m: rng.standard_normal((10, 2)) for m in MODALITIES}))

    rate_ok, details = True, []
    for eta in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6):
        realized = dataio.realized_missing_rate(dataio.apply_missing(ds, eta, seed=5))
        details.append(f"{eta}->{realized:.3f}")
        rate_ok &= abs(realized - eta) <= 0.03

    at_least_one = True
    for eta in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7):
        for mask in dataio.apply_missing(ds, eta, seed=6):
            at_least_one &= all(sum(mask.pattern(i)) >= 1 for i in range(10))

    observed = {mask.pattern(i)
                for mask in dataio.apply_missing(ds, 0.5, seed=7)
                for i in range(10)}
    patterns_ok = len(observed) == 7 and all(sum(p) >= 1 for p in observed)

    record_criterion(
        4, "realized missing rate within 0.03, at least one modality kept, "
           "exactly 7 patterns",
        rate_ok and at_least_one and patterns_ok, " ".join(details))


def test_criterion_5_overfit_tiny_dataset(record_criterion):
    started = time.time()
    gen = GeneratorConfig(
        conversations_per_split={"train": 20, "val": 1, "test": 1},
        length_range=(10, 10), seed=50)
    splits, _ = dataio.generate_synthetic(gen)
    masks = {s: dataio.apply_missing(splits[s], 0.3, derive_seed(50, f"mask:{s}"))
             for s in splits}
    # validate on the training set itself: the point is pure memorization
    datasets = {"train": splits["train"], "val": splits["train"],
                "test": splits["train"]}
    mask_map = {"train": masks["train"], "val": masks["train"],
                "test": masks["train"]}
    config = GCNetConfig(latent_dim=50, window=2,
                         modality_dims=dict(gen.modality_dims),
                         num_classes=4, num_speakers=2, dropout=0.5)
    params, _ = train(config, datasets, mask_map,
                      TrainConfig(epochs=300, seed=1, missing_rate=0.3))
    result = evaluation.evaluate(config, params, splits["train"], masks["train"])
    elapsed = time.time() - started
    record_criterion(
        5, "memorizes 20 conversations (train WAF >= 0.95 in under 5 min)",
        result.metrics.waf >= 0.95 and elapsed < 300.0,
        f"WAF {result.metrics.waf:.4f}, {elapsed:.0f}s")


@pytest.fixture(scope="module")
def benchmark_grid():
    """Trains the shared (variant, eta, seed) grid once: full and the
    complete-data lower bound at eta 0.5, full and both single-branch
    ablations at eta 0.3."""
    gen = GeneratorConfig(seed=BENCH_GEN_SEED)
    splits, _ = dataio.generate_synthetic(gen)
    grid = {"waf": {}, "mse": {}, "baseline": {}, "time": {}}
    for eta in (0.3, 0.5):
        masks = {s: dataio.apply_missing(splits[s], eta,
                                         derive_seed(BENCH_GEN_SEED, f"mask:{s}"))
                 for s in splits}
        means = evaluation.mean_imputation_baseline(splits["train"], masks["train"])
        grid["baseline"][eta] = evaluation.baseline_imputation_mse(
            means, splits["test"], masks["test"])
        cells = ([("full", False), ("no_sgnn", False), ("no_tgnn", False)]
                 if eta == 0.3 else [("full", False), ("full", True)])
        for variant, lower_bound in cells:
            key = (variant, lower_bound, eta)
            for seed in BENCH_SEEDS:
                started = time.time()
                config = GCNetConfig(
                    latent_dim=BENCH_LATENT, window=BENCH_WINDOW,
                    modality_dims=dict(gen.modality_dims),
                    num_classes=gen.num_classes, num_speakers=gen.num_speakers,
                    dropout=0.5, variant=variant)
                params, _ = train(config, splits, masks,
                                  TrainConfig(epochs=BENCH_EPOCHS, seed=seed,
                                              missing_rate=eta,
                                              lower_bound=lower_bound))
                result = evaluation.evaluate(config, params, splits["test"],
                                             masks["test"])
                grid["waf"][key + (seed,)] = result.metrics.waf
                grid["mse"][key + (seed,)] = result.imputation_mse
                grid["time"][key + (seed,)] = time.time() - started
    return grid


def mean_waf(grid, variant, lower_bound, eta):
    return float(np.mean([grid["waf"][(variant, lower_bound, eta, s)]
                          for s in BENCH_SEEDS]))


def test_criterion_6_beats_complete_data_lower_bound(record_criterion,
                                                     benchmark_grid):
    full = mean_waf(benchmark_grid, "full", False, 0.5)
    lower = mean_waf(benchmark_grid, "full", True, 0.5)
    elapsed = sum(benchmark_grid["time"][(v, lb, 0.5, s)]
                  for v, lb in (("full", False), ("full", True))
                  for s in BENCH_SEEDS)
    record_criterion(
        6, "training on incomplete data beats the complete-only lower bound "
           "by 3 points at eta 0.5 (5-seed means, under 30 min)",
        full - lower >= 0.03 and elapsed < 1800.0,
        f"full {full:.4f} vs lower bound {lower:.4f}, {elapsed:.0f}s")


def test_criterion_7_both_graph_branches_matter(record_criterion,
                                                benchmark_grid):
    full = mean_waf(benchmark_grid, "full", False, 0.3)
    no_sgnn = mean_waf(benchmark_grid, "no_sgnn", False, 0.3)
    no_tgnn = mean_waf(benchmark_grid, "no_tgnn", False, 0.3)
    record_criterion(
        7, "full model beats both single-branch ablations at eta 0.3 "
           "(strict on 5-seed means)",
        full > no_sgnn and full > no_tgnn,
        f"full {full:.4f}, no speaker branch {no_sgnn:.4f}, "
        f"no temporal branch {no_tgnn:.4f}")


def test_criterion_8_imputation_beats_mean_fill(record_criterion,
                                                benchmark_grid):
    details, ok = [], True
    for eta in (0.3, 0.5):
        baseline = benchmark_grid["baseline"][eta]
        wins = sum(
            all(benchmark_grid["mse"][("full", False, eta, s)][m] < baseline[m]
                for m in MODALITIES)
            for s in BENCH_SEEDS)
        details.append(f"eta {eta}: {wins}/5 seeds")
        ok &= wins >= 4
    record_criterion(
        8, "learned imputation beats mean fill on every modality for >= 4 of "
           "5 seeds",
        ok, ", ".join(details))


def test_criterion_9_end_to_end_determinism(record_criterion, tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("train_conversations = 6\nval_conversations = 2\n"
                   "test_conversations = 2\nfeature_dim = 4\n"
                   "min_length = 4\nmax_length = 6\n")
    data, masks = tmp_path / "data", tmp_path / "masks"
    assert main(["gen-data", "--config", str(cfg), "--seed", "9",
                 "--out", str(data)]) == 0
    assert main(["mask", "--data", str(data), "--eta", "0.3", "--seed", "9",
                 "--out", str(masks)]) == 0
    outputs = []
    for run in ("a", "b"):
        run_dir, eval_dir = tmp_path / f"run-{run}", tmp_path / f"eval-{run}"
        assert main(["train", "--data", str(data), "--masks", str(masks),
                     "--latent-dim", "8", "--window", "1", "--epochs", "3",
                     "--batch-size", "2", "--seed", "9",
                     "--out", str(run_dir)]) == 0
        assert main(["eval", "--checkpoint", str(run_dir / "checkpoint.json"),
                     "--data", str(data / "test.jsonl"),
                     "--masks", str(masks / "test.mask.jsonl"),
                     "--out", str(eval_dir)]) == 0
        outputs.append(((run_dir / "history.csv").read_bytes(),
                        (eval_dir / "metrics.csv").read_bytes()))
    record_criterion(
        9, "two identical train+eval runs produce bit-identical history and "
           "metrics CSVs",
        outputs[0] == outputs[1])


# frozen against sklearn.metrics.f1_score(average="weighted"); the first row
# is the hand-worked example: class 0 F1 = 2/3, class 1 F1 = 4/5,
# weighted mean = 11/15
F1_CASES = [
    ([0, 0, 1, 1], [0, 1, 1, 1], 11.0 / 15.0),
    ([0, 1, 2], [0, 1, 2], 1.0),
    ([0, 0, 0], [1, 1, 1], 0.0),
    ([0, 1], [1, 0], 0.0),
    ([0, 0, 1], [0, 0, 0], 0.5333333333333333),
    ([0, 1, 1, 2, 2, 2], [0, 1, 2, 2, 1, 2], 0.6666666666666666),
    ([1, 1, 1, 0], [1, 1, 1, 1], 0.6428571428571428),
    ([0, 1, 0, 1, 0, 1], [0, 1, 0, 1, 0, 0], 0.8285714285714286),
    ([2, 2, 2, 2], [2, 2, 2, 2], 1.0),
    ([0, 1, 2, 3], [3, 2, 1, 0], 0.0),
    ([0, 0, 1, 2], [0, 1, 1, 2], 0.75),
    ([0, 0, 0, 0, 1], [0, 0, 0, 1, 1], 0.819047619047619),
    ([3, 3, 0, 0], [3, 0, 3, 0], 0.5),
    ([0], [0], 1.0),
    ([0], [1], 0.0),
    ([1, 0, 1, 0, 1], [1, 1, 1, 1, 1], 0.45),
    ([0, 1, 1, 1, 1, 1], [1, 1, 1, 1, 1, 0], 0.6666666666666666),
    ([2, 0, 1, 2, 0], [2, 0, 1, 1, 0], 0.8),
    ([0, 0, 1, 1, 2, 2], [0, 0, 1, 1, 2, 2], 1.0),
    ([0, 0, 1, 1, 2, 2], [1, 1, 2, 2, 0, 0], 0.0),
]


def test_criterion_10_weighted_f1_correctness(record_criterion):
    worst = max(abs(weighted_f1(preds, labels).waf - expected)
                for labels, preds, expected in F1_CASES)
    record_criterion(
        10, "weighted F1 matches 20 hand-computed cases to 1e-12",
        worst <= 1e-12, f"worst abs diff {worst:.2e}")
