import csv
import json

import pytest
import torch

from trec.data import TaskSpec, generate_task
from trec.denoiser import DenoiserConfig
from trec.diagnostics import (
    ProbeReport,
    SC_SLOTS,
    ZT_SLOTS,
    combo_key,
    combo_probe,
    compare_variance,
    delta_bleu_probe,
    dynamics_summary,
    phase_stats,
    step_deviation,
)
from trec.sampler import SamplerConfig
from trec.schedule import ScalingPolicy, make_schedule
from trec.trainer import build_model

SCHED = make_schedule()
GRID = [500, 1000, 1500]


class CopySelfCond(torch.nn.Module):
    """Degenerate denoiser that returns its self-conditioning input (zeros when absent)."""

    def __init__(self, inner):
        super().__init__()
        self.inner = inner

    @property
    def table(self):
        return self.inner.table

    def encode(self, *a, **k):
        return self.inner.encode(*a, **k)

    def denoise(self, z_t, self_cond, memory, t, pad_mask=None):
        if self_cond is None:
            return self.inner.denoise(z_t, None, memory, t, pad_mask)
        return self_cond.clone()


@pytest.fixture(scope="module")
def valid():
    return generate_task(TaskSpec(kind="copy", n_train=10, n_valid=200, seed=9))[1]


def test_copying_model_has_zero_gain(valid):
    model = CopySelfCond(build_model(DenoiserConfig(), 0))
    g = torch.Generator().manual_seed(0)
    assert delta_bleu_probe(model, valid, SCHED, GRID, g) == 0.0


def test_untrained_model_gain_near_zero(valid):
    model = build_model(DenoiserConfig(), 1)
    g = torch.Generator().manual_seed(0)
    assert abs(delta_bleu_probe(model, valid, SCHED, GRID, g)) <= 0.02


def test_probe_independent_of_order(valid):
    model = build_model(DenoiserConfig(), 2)
    a = delta_bleu_probe(model, valid[:50], SCHED, GRID, torch.Generator().manual_seed(4), details=True)
    b = delta_bleu_probe(model, valid[:50][::-1], SCHED, GRID, torch.Generator().manual_seed(4), details=True)
    assert a["delta_bleu"] == pytest.approx(b["delta_bleu"], abs=1e-12)
    assert set(a["per_t"]) == set(GRID)
    with pytest.raises(ValueError):
        delta_bleu_probe(model, [], SCHED, GRID, torch.Generator())


def test_combo_report_has_six_keys(valid):
    model = build_model(DenoiserConfig(), 3)
    rep = combo_probe(model, valid[:20], SCHED, torch.Generator().manual_seed(0))
    keys = {combo_key(s, z) for s in SC_SLOTS for z in ZT_SLOTS}
    assert set(rep.combo_bleu) == keys and len(keys) == 6
    assert all(set(c) == {500, 1000, 1500, 2000} for c in rep.combo_curves.values())
    json.loads(rep.to_json())
    with pytest.raises(ValueError):
        ProbeReport(0, None, {"a": 1.0})


def test_degraded_model_curves_overlap(valid):
    model = CopySelfCond(build_model(DenoiserConfig(), 4))
    model.training = False
    rep = combo_probe(model, valid[:50], SCHED, torch.Generator().manual_seed(1))
    assert rep.combo_curves[combo_key("z0", "z0")] == rep.combo_curves[combo_key("z0", "zT")]
    assert abs(rep.combo_bleu[combo_key("z0", "z0")] - rep.combo_bleu[combo_key("z0", "zT")]) < 0.02


@pytest.mark.slow
def test_healthy_model_prefers_clean_inputs(trained_copy):
    model, schedule, policy, _, valid = trained_copy
    rep = combo_probe(model, valid[:100], schedule, torch.Generator().manual_seed(2))
    best = max(rep.combo_bleu, key=rep.combo_bleu.get)
    assert rep.combo_bleu[combo_key("z0", "z0")] == rep.combo_bleu[best]


@pytest.mark.slow
def test_trained_model_is_sensitive_to_self_condition(trained_copy):
    model, schedule, _, _, valid = trained_copy
    from trec.data import collate

    batch = collate(valid[:20])
    with torch.no_grad():
        mem = model.encode(batch.src, batch.src_mask)
        z0 = model.table[batch.tgt]
        z_t = torch.randn(z0.shape, generator=torch.Generator().manual_seed(0))
        a = model.denoise(z_t, z0, mem, 1500, batch.tgt_mask)
        b = model.denoise(z_t, torch.zeros_like(z0), mem, 1500, batch.tgt_mask)
    assert (a - b).abs().max().item() > 1e-3


def test_step_deviation_shrinks_for_oracle(oracle_factory):
    table = torch.randn(12, 8, dtype=torch.float64)
    pairs = generate_task(TaskSpec(kind="copy", vocab_size=12, n_train=1, n_valid=5, seed=0))[1]
    model = oracle_factory(table, list(pairs[0].target))
    dev = step_deviation(model, pairs[:1], SCHED, SamplerConfig(n_steps=10), torch.Generator().manual_seed(0))
    assert list(dev) == sorted(dev, reverse=True) and len(dev) == 11
    # a perfect denoiser keeps the implied noise fixed, so the deviation is sqrt(beta_bar_t) * rms(eps)
    ratios = [dev[t] / SCHED.beta_bar[t] ** 0.5 for t in dev if t > 0]
    assert max(ratios) - min(ratios) < 1e-9
    z0_rms = table[list(pairs[0].target)].pow(2).mean().sqrt().item()
    assert dev[0] == pytest.approx((1 - (1 - SCHED.beta_bar[0]) ** 0.5) * z0_rms, rel=1e-9)


def test_dynamics_constant_series():
    lines = [json.dumps({"kind": "train", "run_id": "a", "step": s, "loss_total": 2.5}) for s in range(1, 201)]
    summary = dynamics_summary(lines, window=100)
    rows = summary.series("a", "loss_total")
    assert [r["step"] for r in rows] == [100, 200]
    assert all(r["value"] == 2.5 and r["std"] == 0.0 for r in rows)


def test_dynamics_groups_runs_and_skips_bad_lines(tmp_path):
    lines = []
    for s in range(1, 101):
        lines.append(json.dumps({"kind": "train", "run_id": "rl", "step": s, "advantage": 0.1 * (s % 2)}))
        lines.append(json.dumps({"kind": "train", "run_id": "norl", "step": s, "advantage": 0.0}))
    lines.append("not json")
    lines.append(json.dumps({"kind": "probe", "run_id": "rl", "step": 100, "delta_bleu": 0.03}))
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(lines) + "\n")
    summary = dynamics_summary(path, window=50)
    assert summary.runs() == ["norl", "rl"]
    assert summary.n_malformed == 1
    assert summary.series("rl", "delta_bleu")[0]["value"] == 0.03
    cmp = compare_variance(summary, "rl", "norl", "advantage")
    assert [c[0] for c in cmp] == [50, 100]
    assert all(a == pytest.approx(0.05) and b == 0.0 for _, a, b in cmp)
    out = tmp_path / "d.csv"
    summary.write_csv(out)
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(summary.rows) and float(rows[0]["value"]) >= 0


def test_phase_stats():
    st = phase_stats([0.0, 0.2, 0.5, 0.3, 0.1, 0.0, -0.1, 0.1])
    assert st["early_peak"] == 0.5
    assert st["late_mean"] == pytest.approx(0.0)
    with pytest.raises(ValueError):
        phase_stats([1.0])


def test_scaled_probe_runs(valid):
    model = build_model(DenoiserConfig(), 5)
    out = delta_bleu_probe(model, valid[:10], SCHED, GRID, torch.Generator().manual_seed(0), ScalingPolicy())
    assert -1.0 <= out <= 1.0
