"""Retrieval metrics, attack success rates, the augmentation similarity
probe, and ablation sweeps.

Text retrieval (TR) treats each image as a query over all captions; image
retrieval (IR) is the transpose. Ranking ties break toward the lower index
so results are deterministic. ASR@k counts, among queries that were correct
at k on clean inputs, the fraction made incorrect by the perturbation; with
no clean-correct queries it is reported as null with denominator 0.
"""

from __future__ import annotations

import statistics
import time
import zlib
from dataclasses import dataclass, replace

import numpy as np

from . import attack as attack_mod
from . import synthdata, toyvlp
from .attack import AttackConfig, Uap
from .jsonio import atomic_write_text, canonical_dumps, write_csv
from .rng import Rng
from .synthdata import AugSpec

_PROBE_SALT = 0x9C0B3AB5A17ED


class EvalError(ValueError):
    """Invalid evaluation request."""


K_VALUES = (1, 5, 10)


# --------------------------------------------------------------------------
# ranking core (pure functions over a similarity matrix)
# --------------------------------------------------------------------------

def hits_at_k(sim: np.ndarray, k: int):
    """(tr_hits, ir_hits) boolean arrays: query i is a hit iff index i ranks
    in the top k of its row (TR) / column (IR), ties broken by lower index."""
    n = sim.shape[0]
    idx = np.arange(n)
    tr = np.empty(n, dtype=bool)
    ir = np.empty(n, dtype=bool)
    for i in range(n):
        row = sim[i]
        tr[i] = ((row > row[i]) | ((row == row[i]) & (idx < i))).sum() < k
        col = sim[:, i]
        ir[i] = ((col > col[i]) | ((col == col[i]) & (idx < i))).sum() < k
    return tr, ir


def asr_from_hits(clean_hits: np.ndarray, adv_hits: np.ndarray):
    """(asr, denominator): fraction of clean-correct queries flipped."""
    q = clean_hits
    den = int(q.sum())
    if den == 0:
        return None, 0
    return float((q & ~adv_hits).sum() / den), den


# --------------------------------------------------------------------------
# model-backed metrics
# --------------------------------------------------------------------------

def similarity_matrix(params: toyvlp.DualEncoderParams, test_set: synthdata.Dataset,
                      uap: Uap | None = None, text_mode: str = "token") -> np.ndarray:
    """Pairwise cosine S[i, j] = cos(f_I(image_i'), f_T(text_j')); the primes
    apply the perturbation to both modalities when a uap is given."""
    if text_mode not in ("token", "embed"):
        raise EvalError(f"text_mode must be 'token' or 'embed', got {text_mode!r}")
    images, tokens = test_set.images, test_set.tokens
    if uap is None:
        img_emb = toyvlp.encode_image(params, images)
        txt_emb = toyvlp.encode_text(params, tokens)
    else:
        # the position cache is only valid for the token array it was
        # computed from, so key it by content, not just length
        crc = zlib.crc32(np.ascontiguousarray(tokens, dtype=np.int64).tobytes())
        positions = uap.key_positions
        if positions is None or getattr(uap, "_key_positions_crc", None) != crc:
            positions = attack_mod.select_key_positions(params, tokens)
            uap.key_positions = positions
            uap._key_positions_crc = crc
        img_emb = toyvlp.encode_image(params, attack_mod.apply_image(images, uap.delta_v))
        if text_mode == "token":
            adv_tokens = attack_mod.apply_text(tokens, positions, uap.delta_t_token)
            txt_emb = toyvlp.encode_text(params, adv_tokens)
        else:
            txt_emb = toyvlp.encode_text(params, tokens,
                                         override_positions=positions,
                                         override_vector=uap.delta_t_embed)
    return img_emb @ txt_emb.T


def recall_at_k(params, test_set, uap: Uap | None, k: int, text_mode: str = "token"):
    """(tr_rate, ir_rate) at cutoff k; perturbs both modalities if uap given."""
    n = len(test_set)
    if not 1 <= k <= n:
        raise EvalError(f"k={k} out of range for corpus size {n}")
    tr, ir = hits_at_k(similarity_matrix(params, test_set, uap, text_mode), k)
    return float(tr.mean()), float(ir.mean())


def asr_at_k(params, test_set, uap: Uap, k: int, text_mode: str = "token"):
    """(tr_asr, ir_asr, (tr_den, ir_den)); ASR is None when its denominator
    is zero."""
    if uap is None:
        raise EvalError("asr_at_k requires a perturbation")
    n = len(test_set)
    if not 1 <= k <= n:
        raise EvalError(f"k={k} out of range for corpus size {n}")
    clean_tr, clean_ir = hits_at_k(similarity_matrix(params, test_set, None), k)
    adv_tr, adv_ir = hits_at_k(similarity_matrix(params, test_set, uap, text_mode), k)
    tr_asr, tr_den = asr_from_hits(clean_tr, adv_tr)
    ir_asr, ir_den = asr_from_hits(clean_ir, adv_ir)
    return tr_asr, ir_asr, (tr_den, ir_den)


def pair_similarity_probe(params, test_set, aug: AugSpec, seed: int = 0) -> float:
    """Mean cosine of matched (augmented image, clean caption) pairs."""
    rng = Rng(seed ^ _PROBE_SALT)
    images = np.stack([synthdata.augment(test_set.images[i], aug, rng)
                       for i in range(len(test_set))])
    img_emb = toyvlp.encode_image(params, images)
    txt_emb = toyvlp.encode_text(params, test_set.tokens)
    return float((img_emb * txt_emb).sum(axis=1).mean())


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

def evaluate(params, test_set, uap: Uap, config_echo: dict | None = None,
             wallclock_attack_seconds: float = 0.0, probe_aug: AugSpec | None = None,
             seed: int = 0, text_mode: str = "token") -> dict:
    """Full retrieval report: clean/adversarial R@K, ASR@K with denominators,
    similarity probes, and a zero-perturbation control row (always 0)."""
    report = {
        "seed": seed,
        "text_mode": text_mode,
        "config": config_echo or {},
        "wallclock_attack_seconds": wallclock_attack_seconds,
    }
    clean_sim = similarity_matrix(params, test_set, None)
    adv_sim = similarity_matrix(params, test_set, uap, text_mode)
    control_sim = similarity_matrix(params, test_set, Uap.null(), text_mode)
    for k in K_VALUES:
        ctr, cir = hits_at_k(clean_sim, k)
        atr, air = hits_at_k(adv_sim, k)
        ntr, nir = hits_at_k(control_sim, k)
        report[f"r_at{k}_tr_clean"] = float(ctr.mean())
        report[f"r_at{k}_ir_clean"] = float(cir.mean())
        report[f"r_at{k}_tr_adv"] = float(atr.mean())
        report[f"r_at{k}_ir_adv"] = float(air.mean())
        for name, clean, adv in (("tr", ctr, atr), ("ir", cir, air)):
            asr, den = asr_from_hits(clean, adv)
            report[f"asr_at{k}_{name}"] = asr
            report[f"asr_at{k}_{name}_den"] = den
        for name, clean, ctl in (("tr", ctr, ntr), ("ir", cir, nir)):
            asr, den = asr_from_hits(clean, ctl)
            report[f"control_asr_at{k}_{name}"] = asr
            report[f"control_asr_at{k}_{name}_den"] = den
    report["mean_pair_cosine_clean"] = pair_similarity_probe(
        params, test_set, AugSpec.none(), seed)
    report["mean_pair_cosine_aug"] = pair_similarity_probe(
        params, test_set, probe_aug or AugSpec.brightness(0.0, 0.05), seed)
    return report


def save_report(report: dict, path) -> None:
    atomic_write_text(path, canonical_dumps(report) + "\n")


# --------------------------------------------------------------------------
# ablation sweeps
# --------------------------------------------------------------------------

SWEEP_PARAMS = ("alpha", "beta", "eps_v", "aug")


@dataclass
class SweepSpec:
    param: str
    values: list
    seeds: list

    def validate(self):
        if self.param not in SWEEP_PARAMS:
            raise EvalError(f"sweep parameter must be one of {SWEEP_PARAMS}, "
                            f"got {self.param!r}")
        if not self.values or not self.seeds:
            raise EvalError("sweep needs at least one value and one seed")


def _sweep_value_str(param, value):
    return str(value) if param == "aug" else canonical_dumps(float(value))


def run_sweep(params: toyvlp.DualEncoderParams, train_set, test_set,
              spec: SweepSpec, base: AttackConfig, text_mode: str = "token",
              method: str = "do-uap", progress=None):
    """One fresh attack + evaluation per (value, seed); rows ordered by the
    given value order then seed order, with mean and sd aggregate rows after
    each value group."""
    spec.validate()
    base.validate()
    key_positions = attack_mod.select_key_positions(params, train_set.tokens)
    runner = attack_mod.do_uap if method == "do-uap" else attack_mod.generator_baseline
    rows = []
    for value in spec.values:
        typed = value if spec.param == "aug" else float(value)
        per_seed = []
        for seed in spec.seeds:
            cfg = replace(base, seed=int(seed), **{spec.param: typed})
            t0 = time.perf_counter()
            uap, _ = runner(params, train_set, cfg, key_positions=key_positions)
            wall = time.perf_counter() - t0
            tr, ir, _ = asr_at_k(params, test_set, uap, 1, text_mode)
            tr = 0.0 if tr is None else tr
            ir = 0.0 if ir is None else ir
            mean_asr = 0.5 * (tr + ir)
            rows.append({
                "param": spec.param, "value": _sweep_value_str(spec.param, value),
                "seed": int(seed), "tr_asr": tr, "ir_asr": ir,
                "mean_asr": mean_asr, "wallclock": wall,
            })
            per_seed.append((tr, ir, mean_asr, wall))
            if progress is not None:
                progress(spec.param, value, seed, mean_asr)
        cols = list(zip(*per_seed))
        agg_mean = [float(np.mean(c)) for c in cols]
        agg_sd = [statistics.stdev(c) if len(c) > 1 else 0.0 for c in cols]
        for label, agg in (("mean", agg_mean), ("sd", agg_sd)):
            rows.append({
                "param": spec.param, "value": _sweep_value_str(spec.param, value),
                "seed": label, "tr_asr": agg[0], "ir_asr": agg[1],
                "mean_asr": agg[2], "wallclock": agg[3],
            })
    return rows


SWEEP_HEADER = ("param", "value", "seed", "tr_asr", "ir_asr", "mean_asr", "wallclock")


def save_sweep(rows, path) -> None:
    write_csv(path, SWEEP_HEADER, [[row[h] for h in SWEEP_HEADER] for row in rows])
