"""End-to-end acceptance checks.

Each test prints a single PASS/FAIL line (also collected into the terminal
summary) and then asserts. The training experiments are marked ``slow``;
together they take roughly half an hour on one core.
"""

import itertools
import json
import time

import numpy as np
import pytest

import test_layers
import test_metrics
import test_model
from mtm import cli
from mtm import diff as D
from mtm import layers as L
from mtm.data import SynthSpec, cooccurring_timepoints, synth_generate
from mtm.model import ModelConfig, batch_from_series, check_gradients

SEEDS = [0, 1, 2, 3, 4]
BASE = {"d_model": 16, "n_blocks": 2, "rate": 3, "dropout": 0.0, "lr": 3e-3, "batch_size": 32, "epochs": 15}


# shared experiment runner -----------------------------------------------------------

class Lab:
    """Synthesises each task once and caches finished training runs."""

    def __init__(self, root):
        self.root = root
        self.runs = {}

    def dataset(self, channels, samples, alpha):
        out = self.root / f"data_c{channels}_n{samples}_a{alpha}"
        if not (out / "dataset.ndjson").exists():
            code = cli.main(["synth", "--channels", str(channels), "--samples", str(samples),
                             "--alpha", str(alpha), "--seed", "0", "--out", str(out)])
            assert code == 0
        return out / "dataset.ndjson"

    def run(self, name, data, seed, **overrides):
        key = (name, str(data), seed)
        if key not in self.runs:
            out = self.root / "runs" / name / f"seed{seed}"
            cfg = {**BASE, **overrides, "data": str(data), "seed": seed}
            cli.run_train(cfg, str(out))
            self.runs[key] = out / "metrics.json"
        return self.runs[key]

    def sweep(self, name, data, seeds=SEEDS, **overrides):
        return [self.run(name, data, s, **overrides) for s in seeds]


def accuracies(paths):
    return np.array([json.loads(p.read_text())["accuracy"] for p in paths])


def cli_compare(capsys, a, b):
    capsys.readouterr()
    code = cli.main(["compare", "--a", *map(str, a), "--b", *map(str, b)])
    out = capsys.readouterr().out.splitlines()
    assert code == 0
    print(out[0])
    return json.loads(out[1])


@pytest.fixture(scope="session")
def lab(tmp_path_factory):
    return Lab(tmp_path_factory.mktemp("acceptance"))


# 1 -----------------------------------------------------------------------------------

def test_c01_gradient_check_all_flag_combinations(verdict):
    t0 = time.perf_counter()
    worst, failed = 0.0, []
    for pool, cls, mix, ch in itertools.product([True, False], repeat=4):
        for mlp in ([False, True] if ch else [False]):
            cfg = ModelConfig(n_channels=2, d_model=8, n_blocks=1, dropout=0.0, pooling=pool, cls=cls,
                              mixing=mix, channel_attention=ch, channel_attention_as_mlp=mlp)
            rep = check_gradients(cfg, max_elements=8, rtol=1e-4)
            worst = max(worst, max(rep.errors.values()))
            if not rep.passed:
                failed.append((pool, cls, mix, ch, mlp))
    took = time.perf_counter() - t0
    ok = not failed and worst <= 1e-4 and took < 60
    verdict(1, ok, f"24 flag combinations, max rel error {worst:.2e}, {took:.1f} s, failures {failed}")
    assert ok


# 2 -----------------------------------------------------------------------------------

def test_c02_masking_soundness(verdict):
    suites = {
        "missing-pattern preservation": test_layers.test_missing_pattern_preserved,
        "mask-value independence": test_layers.test_mask_value_independence,
        "batch-padding inertness": test_model.test_batch_padding_inertness,
    }
    bad = []
    for name, prop in suites.items():
        try:
            prop()
        except AssertionError:
            bad.append(name)
    verdict(2, not bad, f"3 property suites x 100 trials, failing: {bad or 'none'}")
    assert not bad


# 3 -----------------------------------------------------------------------------------

def test_c03_pooling_adds_cooccurrence(verdict):
    data = synth_generate(SynthSpec(n_samples=1000, n_channels=4, alpha=0.9, seed=0))
    batch = batch_from_series(data)
    g = L.embed_input(batch.values, batch.observed, batch.times, batch.n_times,
                      D.constant(np.ones((4, 8))), D.constant(np.zeros((4, 8))))
    rng = np.random.default_rng(0)
    p = {"w": D.constant(rng.normal(size=(16, 8))), "b": D.constant(np.zeros(8))}
    out = L.masked_concat_pool(g, 3.0, L.default_unit(batch.times, batch.n_times), p)

    def pairs(obs):
        return {(i, j) for row in obs for i in np.flatnonzero(row) for j in np.flatnonzero(row) if i < j}

    superset, before, after = 0, [], []
    for b, s in enumerate(data):
        n, m = int(batch.n_times[b]), int(out.n_times[b])
        pre, post = batch.observed[b, :n], out.observed[b, 1:m + 1]
        superset += pairs(pre) <= pairs(post)
        before.append((pre.sum(axis=1) >= 2).mean())
        after.append((post.sum(axis=1) >= 2).mean())
        assert (pre.sum(axis=1) >= 2).sum() == cooccurring_timepoints(s)
    fb, fa = float(np.mean(before)), float(np.mean(after))
    ok = superset == len(data) and fa > fb
    verdict(3, ok, f"superset in {superset}/{len(data)} samples, co-occurring fraction {fb:.3f} -> {fa:.3f}")
    assert ok


# 4 -----------------------------------------------------------------------------------

@pytest.mark.slow
def test_c04_token_mixing_beats_no_mixing(lab, capsys, verdict):
    data = lab.dataset(4, 2000, 1.0)
    full = lab.sweep("a1-full", data)
    plain = lab.sweep("a1-nomix", data, mixing=False)
    res = cli_compare(capsys, full, plain)
    gap = 100 * (res["mean_a"] - res["mean_b"])
    ok = gap >= 5.0 and res["p_value"] < 0.05
    verdict(4, ok, f"full {res['a']} vs no-mixing {res['b']}, gap {gap:.1f} pts, p = {res['p_value']:.3g}")
    assert ok


# 5 -----------------------------------------------------------------------------------

@pytest.mark.slow
def test_c05_channel_attention_no_better_than_mlp(lab, capsys, verdict):
    data = lab.dataset(4, 2000, 1.0)
    plain = dict(mixing=False, pooling=False)
    attn = lab.sweep("a1-plain-attn", data, **plain)
    mlp = lab.sweep("a1-plain-mlp", data, channel_attention_as_mlp=True, **plain)
    res = cli_compare(capsys, attn, mlp)
    gap = 100 * abs(res["mean_a"] - res["mean_b"])
    ok = gap <= 2.0 and res["p_value"] > 0.05
    verdict(5, ok, f"channel attention {res['a']} vs mlp {res['b']}, |gap| {gap:.1f} pts, "
                   f"p = {res['p_value']:.3g}")
    assert ok


# 6 -----------------------------------------------------------------------------------

@pytest.mark.slow
def test_c06_concat_pooling_not_worse(lab, verdict):
    data = lab.dataset(4, 1000, 0.9)
    means = {kind: 100 * accuracies(lab.sweep(f"a09-{kind}", data, pooling_kind=kind)).mean()
             for kind in ("concat", "max", "avg")}
    ok = means["concat"] >= means["max"] - 0.5 and means["concat"] >= means["avg"] - 0.5
    verdict(6, ok, "mean accuracy " + ", ".join(f"{k} {v:.1f}" for k, v in means.items()))
    assert ok


# 7 -----------------------------------------------------------------------------------

@pytest.mark.slow
def test_c07_sparsity_robustness(lab, verdict):
    data = lab.dataset(4, 1000, 0.5)
    ratios = [0.0, 0.25, 0.5]
    seeds = SEEDS[:3]
    full = [100 * accuracies(lab.sweep(f"a05-full-m{r}", data, seeds, mask_ratio=r)).mean() for r in ratios]
    plain = [100 * accuracies(lab.sweep(f"a05-nomix-m{r}", data, seeds, mask_ratio=r, mixing=False)).mean()
             for r in ratios]
    monotone = all(b <= a + 1.0 for a, b in zip(full, full[1:]))
    wins = all(f > p for f, p in zip(full, plain))
    ok = monotone and wins
    verdict(7, ok, "full " + "/".join(f"{a:.1f}" for a in full) + "  no-mixing "
            + "/".join(f"{a:.1f}" for a in plain) + f" at mask ratios {ratios}")
    assert ok


# 8 -----------------------------------------------------------------------------------

def test_c08_metric_oracles(verdict):
    checks = [test_metrics.test_metric_oracles_1000_instances, test_metrics.test_welch_random_against_mpmath]
    checks += [lambda a=a, b=b: test_metrics.test_welch_against_mpmath(a, b) for a, b in test_metrics.FIXED]
    bad = 0
    for check in checks:
        try:
            check()
        except AssertionError:
            bad += 1
    verdict(8, bad == 0, f"1000 exact oracle instances, 105 Welch p-values vs mpmath, {bad} failing groups")
    assert bad == 0


# 9 -----------------------------------------------------------------------------------

def test_c09_train_rerun_is_bit_exact(tmp_path, capsys, verdict):
    assert cli.main(["synth", "--channels", "3", "--samples", "200", "--alpha", "0.5", "--seed", "5",
                     "--out", str(tmp_path / "data")]) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"d_model": 8, "n_blocks": 2, "epochs": 3, "dropout": 0.1, "batch_size": 16}))
    outs = []
    for name, extra in [("a", []), ("b", []), ("c", ["--ablate", "no-cls"]), ("d", ["--ablate", "no-cls"])]:
        code = cli.main(["train", "--config", str(cfg), "--data", str(tmp_path / "data" / "dataset.ndjson"),
                         "--seed", "9", "--mask-ratio", "0.2", "--out", str(tmp_path / name), *extra])
        assert code == 0
        outs.append((tmp_path / name / "metrics.json").read_bytes())
    capsys.readouterr()
    ok = outs[0] == outs[1] and outs[2] == outs[3]
    verdict(9, ok, "two configurations trained twice each, metrics.json byte-identical")
    assert ok


# 10 ----------------------------------------------------------------------------------

@pytest.mark.slow
def test_c10_end_to_end_trainability(lab, verdict):
    data = lab.dataset(2, 500, 0.0)
    t0 = time.perf_counter()
    path = lab.run("a0-c2", data, 0, epochs=30)
    took = time.perf_counter() - t0
    acc = float(accuracies([path])[0])
    ok = acc >= 0.95 and took < 600
    verdict(10, ok, f"test accuracy {100 * acc:.1f}% after 30 epochs in {took:.0f} s")
    assert ok
