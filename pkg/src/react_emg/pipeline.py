"""End-to-end desk run: generate, pretrain, train both phases, evaluate.

Each stage goes through the same command functions as the CLI, so the
checkpoints in between are the float32 files a user would get.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone
from .cli import cmd_eval, cmd_gen_data, cmd_pretrain, cmd_train
from .evaluate import relative_improvement

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    seed: int
    baseline: dict                       # mode -> MetricsReport
    react: dict                          # (mode, k) -> MetricsReport
    timings: dict = field(default_factory=dict)

    def improvement(self, mode, k=15):
        return relative_improvement(self.baseline[mode].mae_deg, self.react[(mode, k)].mae_deg)

    def summary(self):
        out = {"seed": self.seed, "timings": self.timings}
        for mode, rep in self.baseline.items():
            out[f"baseline_{mode}"] = rep.mae_deg
        for (mode, k), rep in self.react.items():
            out[f"react_{mode}_k{k}"] = rep.mae_deg
        return out


def _write_overrides(path, overrides):
    if not overrides:
        return None
    Path(path).write_text(json.dumps(overrides, indent=2, sort_keys=True) + "\n")
    return path


def run_pipeline(workdir, seed=0, corpus=None, split="user", ks=(0, 15),
                 overrides=None, modes=backbone.MODES):
    """Run every stage under ``workdir`` and return a :class:`PipelineResult`.

    ``corpus`` holds ``gen-data`` keyword arguments; ``overrides`` maps
    ``pretrain``/``phase1``/``phase2`` to training overrides.
    """
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    overrides = overrides or {}
    timings = {}

    def timed(name, fn, *args, **kw):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        timings[name] = round(time.perf_counter() - t0, 2)
        log.info("%s took %.1f s", name, timings[name])
        return out

    data = work / "corpus"
    timed("gen-data", cmd_gen_data, **{**(corpus or {}), "seed": seed, "out": data})
    cfgs = {p: _write_overrides(work / f"{p}.json", overrides.get(p))
            for p in ("pretrain", "phase1", "phase2")}
    ck0 = timed("pretrain", cmd_pretrain, data, work / "pretrain", seed, cfgs["pretrain"])
    ck1 = timed("phase1", cmd_train, 1, data, ck0, work / "phase1", seed, cfgs["phase1"])
    ck2 = timed("phase2", cmd_train, 2, data, ck1, work / "phase2", seed, cfgs["phase2"])
    base, _ = timed("eval-baseline", cmd_eval, data, ck0, work / "eval_baseline", split,
                    modes, ks, seed, True)
    react, _ = timed("eval-react", cmd_eval, data, ck2, work / "eval_react", split, modes,
                     ks, seed)
    result = PipelineResult(seed, {r.mode: r for r in base},
                            {(r.mode, r.k): r for r in react}, timings)
    (work / "summary.json").write_text(json.dumps(result.summary(), indent=2,
                                                  sort_keys=True) + "\n")
    return result


def median_improvement(results, mode, k=15):
    return float(np.median([r.improvement(mode, k) for r in results]))
