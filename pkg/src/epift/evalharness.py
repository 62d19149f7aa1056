"""Batch evaluation over test episodes and paper-style reporting."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import metaopt
from .episodes import sample_episode


class UsageError(ValueError):
    """The harness was invoked without usable inputs."""


@dataclass
class EvalRecord:
    episode_id: int
    seed: int
    acc_before: float
    acc_after: float
    scheme: str


@dataclass
class Summary:
    mean_before: float
    mean_after: float
    ci_before: float          # 1.96 * sample std / sqrt(E)
    ci_after: float
    episodes: int


def episode_seed(run_seed, index):
    """Stable per-episode seed so baseline and variant runs see identical episodes."""
    h = hashlib.blake2b(f"{run_seed}:{index}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") % (2 ** 63)


def summarize(records):
    """Pure function of the record list; recomputable bit-identically."""
    if not records:
        raise UsageError("no evaluation records to summarize")
    before = np.array([r.acc_before for r in records], dtype=np.float64)
    after = np.array([r.acc_after for r in records], dtype=np.float64)
    e = len(records)

    def ci(x):
        return 0.0 if e < 2 else float(1.96 * np.std(x, ddof=1) / np.sqrt(e))

    return Summary(mean_before=float(before.mean()), mean_after=float(after.mean()),
                   ci_before=ci(before), ci_after=ci(after), episodes=e)


def evaluate_suite(theta, curvature, pool, cfg: metaopt.MetaConfig, way, shot, queries,
                   n_episodes, run_seed):
    """Per-episode fine-tune records plus the aggregate Summary.

    Episodes are drawn with seeds derived from (run_seed, index), so two runs
    with the same run_seed evaluate on identical episodes.
    """
    if n_episodes < 1:
        raise UsageError(f"need at least one episode, got {n_episodes}")
    records = []
    for i in range(n_episodes):
        seed = episode_seed(run_seed, i)
        rng = np.random.default_rng(seed)
        episode = sample_episode(pool, way, shot, queries, rng)
        rec = metaopt.episode_finetune_eval(theta, curvature, episode, cfg, rng=rng)
        records.append(EvalRecord(episode_id=i, seed=seed,
                                  acc_before=rec["acc_before"],
                                  acc_after=rec["acc_after"],
                                  scheme=cfg.scheme))
    return records, summarize(records)


# -- reporting ------------------------------------------------------------


def compare_runs(baseline: Summary, variant: Summary):
    """Gain of the fine-tuned variant over the non-fine-tuned baseline mean."""
    gain = variant.mean_after - baseline.mean_before
    lo_v = variant.mean_after - variant.ci_after
    hi_v = variant.mean_after + variant.ci_after
    lo_b = baseline.mean_before - baseline.ci_before
    hi_b = baseline.mean_before + baseline.ci_before
    overlap = (lo_v <= hi_b) and (lo_b <= hi_v)
    return {"gain": gain, "gain_text": format_gain(gain), "ci_overlap": overlap}


def format_gain(gain):
    return f"{gain * 100:+.2f}%"


def format_acc(mean, ci):
    return f"{mean * 100:.2f} ± {ci * 100:.2f}%"


def render_table(rows):
    """Rows of (label, Summary, gain or None) as a 'w/o FT | w/ FT | Gain' text table."""
    out = [f"{'Model':<24} {'w/o FT':>18} {'w/ FT':>18} {'Gain':>8}"]
    for label, s, gain in rows:
        wo = format_acc(s.mean_before, s.ci_before)
        wf = format_acc(s.mean_after, s.ci_after) if s.mean_after is not None else "--"
        g = format_gain(gain) if gain is not None else "--"
        out.append(f"{label:<24} {wo:>18} {wf:>18} {g:>8}")
    return "\n".join(out)


def records_to_csv(records):
    lines = ["episode_id,seed,acc_before,acc_after"]
    for r in records:
        lines.append(f"{r.episode_id},{r.seed},{r.acc_before:.10f},{r.acc_after:.10f}")
    return "\n".join(lines) + "\n"


def records_from_csv(text):
    out = []
    for line in text.strip().splitlines()[1:]:
        eid, seed, b, a = line.split(",")
        out.append(EvalRecord(episode_id=int(eid), seed=int(seed),
                              acc_before=float(b), acc_after=float(a), scheme=""))
    return out


def summary_to_json(summary: Summary):
    return json.dumps(asdict(summary), indent=2, sort_keys=True) + "\n"
