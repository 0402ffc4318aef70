"""Variant comparison: train full / no-AFFM / no-MS models identically on a
shared synthetic dataset and compare held-out Dice."""
from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Callable, Sequence

from .config import RunConfig
from .data import Dataset, generate
from .model import VARIANTS, ClapsModel, variant_flags
from .pipeline import evaluate, model_predictor
from .train import Trainer

HELD_OUT_SPLIT = "test"


@dataclass
class VariantResult:
    variant: str
    seed: int
    dice: float  # mean over held-out samples
    dice_present: float
    final_loss: float


def held_out_dice(model: ClapsModel, ds: Dataset, split: str = HELD_OUT_SPLIT) -> tuple[float, float]:
    """(mean Dice over all samples, mean over lesion-present samples)."""
    rows = evaluate(ds.split(split), model_predictor(model))
    n = sum(r.n_samples for r in rows)
    n_present = sum(r.n_present for r in rows)
    if n == 0:
        raise ValueError(f"dataset has no {split!r} samples to evaluate")
    dice = sum(r.dice * r.n_samples for r in rows) / n
    present = sum(r.dice_present * r.n_present for r in rows if r.n_present) / n_present if n_present else float("nan")
    return dice, present


def train_variant(cfg: RunConfig, variant: str, ds: Dataset) -> tuple[ClapsModel, float]:
    vcfg = cfg.replace(**variant_flags(variant))
    model = ClapsModel(vcfg, ds.registry)
    history = Trainer(model, ds).run()
    return model, history[-1].total if history else float("nan")


def ablate(cfg: RunConfig, seeds: Sequence[int], variants: Sequence[str] = VARIANTS,
           progress: Callable[[str], None] | None = None) -> list[VariantResult]:
    """Every variant sees the same dataset and schedule for a given seed."""
    results = []
    for seed in seeds:
        scfg = cfg.replace(seed=seed)
        ds = generate(scfg.synth, seed)
        for v in variants:
            model, final = train_variant(scfg, v, ds)
            dice, present = held_out_dice(model, ds)
            results.append(VariantResult(v, seed, dice, present, final))
            if progress:
                progress(f"seed {seed} {v}: dice {dice:.4f}")
    return results


def summarize(results: Sequence[VariantResult], seeds: Sequence[int]) -> tuple[list[str], list[list]]:
    """One row per variant: median Dice then the per-seed values."""
    header = ["variant", "median_dice"] + [f"dice_seed_{s}" for s in seeds]
    rows = []
    for v in dict.fromkeys(r.variant for r in results):
        by_seed = {r.seed: r.dice for r in results if r.variant == v}
        vals = [by_seed[s] for s in seeds]
        rows.append([v, statistics.median(vals)] + vals)
    return header, rows
