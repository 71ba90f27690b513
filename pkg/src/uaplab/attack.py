"""Universal perturbation attacks on the trained dual encoder.

The direct method optimizes a single image delta (sign-gradient ascent
under an l-inf budget) and a single continuous text embedding vector,
jointly, against a loss that combines the contrastive training objective
on perturbed pairs with a term pushing perturbed embeddings away from
their clean counterparts. After optimization the text vector is projected
onto the nearest vocabulary token so the attack is realizable as a
one-token substitution.

A generator baseline runs the identical loop but produces the image delta
from a small latent-to-image MLP whose weights are what gets updated; it
exists for the wall-clock comparison, not for quality.
"""

from __future__ import annotations

import base64
import time
from dataclasses import dataclass, field

import numpy as np

from . import synthdata, toyvlp
from .autodiff import Graph
from .jsonio import atomic_write_bytes, canonical_dumps
from .rng import Rng
from .synthdata import AugSpec

_ATTACK_SALT = 0xADE1A1DE0F00D5
_GEN_SALT = 0x6E6E6E6E12345678

SPECIAL_TOKENS = (synthdata.PAD, synthdata.BOS, synthdata.EOS)
_ARTIFACT_VERSION = 1


class AttackError(RuntimeError):
    """Attack loop failure (divergence, ineligible inputs, bad config)."""


@dataclass
class AttackConfig:
    eps_v: float = 12.0 / 255.0
    eps_t: int = 1
    alpha: float = 1.0
    beta: float = 0.1
    epochs: int = 2
    batch: int = 64
    aug: AugSpec = field(default_factory=lambda: AugSpec.brightness(0.0, 0.05))
    seed: int = 42
    text_step_scale: float | None = None  # None: 0.1 x RMS of the token table

    def validate(self):
        if not 0.0 < self.eps_v <= 1.0:
            raise AttackError(f"eps_v must be in (0, 1], got {self.eps_v}")
        if self.eps_t != 1:
            raise AttackError(f"only the one-token text budget is supported, got {self.eps_t}")
        if not 0.0 < self.beta <= 1.0:
            raise AttackError(f"beta must be in (0, 1], got {self.beta}")
        if self.alpha < 0.0:
            raise AttackError(f"alpha must be >= 0, got {self.alpha}")
        if self.epochs < 0:
            raise AttackError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch < 2:
            raise AttackError(f"batch must be >= 2, got {self.batch}")


@dataclass
class Uap:
    """The universal perturbation pair plus the per-sentence position cache."""

    delta_v: np.ndarray                    # (16, 16, 3), l-inf bounded
    delta_t_embed: np.ndarray              # (32,) continuous text vector
    delta_t_token: int | None              # projected token; None = keep original
    key_positions: np.ndarray | None = None

    @classmethod
    def null(cls):
        """Zero image delta, original-token substitution (the control)."""
        return cls(np.zeros((synthdata.IMAGE_H, synthdata.IMAGE_W, synthdata.IMAGE_C)),
                   np.zeros(toyvlp.EMBED_DIM), None)

    def image_only(self) -> "Uap":
        """Diagnostic variant: image delta kept, text side disabled."""
        return Uap(self.delta_v, np.zeros_like(self.delta_t_embed), None,
                   self.key_positions)

    def text_only(self) -> "Uap":
        """Diagnostic variant: text perturbation kept, image delta zeroed."""
        return Uap(np.zeros_like(self.delta_v), self.delta_t_embed,
                   self.delta_t_token, self.key_positions)


@dataclass
class GeneratorParams:
    z: np.ndarray    # (64,) fixed latent
    w1: np.ndarray   # (64, 256)
    b1: np.ndarray   # (256,)
    w2: np.ndarray   # (256, 768)
    b2: np.ndarray   # (768,)


def apply_image(images: np.ndarray, delta_v: np.ndarray) -> np.ndarray:
    """clip(v + delta, 0, 1) elementwise; broadcasts over the batch."""
    return np.clip(np.asarray(images, dtype=np.float64) + delta_v, 0.0, 1.0)


def eligible_positions(tokens_row: np.ndarray) -> np.ndarray:
    return np.flatnonzero(~np.isin(tokens_row, SPECIAL_TOKENS))


def apply_text(tokens: np.ndarray, key_positions: np.ndarray,
               token_id: int | None) -> np.ndarray:
    """Substitute token_id at each sentence's key position (exactly one slot).

    token_id None writes the original token back: the perturbed sentence then
    equals the clean one, which is the zero-perturbation control.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    key_positions = np.asarray(key_positions, dtype=np.int64)
    n, seq = tokens.shape
    if key_positions.shape != (n,):
        raise AttackError(f"key_positions shape {key_positions.shape} != ({n},)")
    for i in range(n):
        p = key_positions[i]
        if not 0 <= p < seq or tokens[i, p] in SPECIAL_TOKENS:
            raise AttackError(f"sentence {i}: position {p} is not an eligible token slot")
    out = tokens.copy()
    if token_id is not None:
        out[np.arange(n), key_positions] = token_id
    return out


PROBE_TOKEN = synthdata.TOK_THE


def select_key_positions(params: toyvlp.DualEncoderParams,
                         tokens: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Per-sentence substitution slot, chosen once and cached.

    For each eligible (non-special) position we substitute a fixed neutral
    probe token and measure how far the caption embedding moves; the position
    with the largest displacement wins, ties breaking toward the lower index.
    Raw gradient norms at the token embeddings do not work here: through the
    mean pool every position's Jacobian is the same 1/len scaling times a
    tanh slope, so they barely reflect which token carries the sentence's
    content.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n, _ = tokens.shape
    out = np.empty(n, dtype=np.int64)
    for s in range(0, n, chunk):
        block = tokens[s:min(s + chunk, n)]
        clean = toyvlp.encode_text(params, block)
        variants, owners = [], []
        for i in range(len(block)):
            elig = eligible_positions(block[i])
            if elig.size == 0:
                raise AttackError(f"sentence {s + i} has no eligible position")
            for p in elig:
                mod = block[i].copy()
                mod[p] = PROBE_TOKEN
                variants.append(mod)
                owners.append((i, p))
        emb = toyvlp.encode_text(params, np.stack(variants))
        disp = np.linalg.norm(emb - clean[[i for i, _ in owners]], axis=1)
        best = {}
        for (i, p), d in zip(owners, disp):
            if i not in best or d > best[i][0]:  # strict: ties keep lower p
                best[i] = (d, p)
        for i, (_, p) in best.items():
            out[s + i] = p
    return out


# --------------------------------------------------------------------------
# the multimodal objective
# --------------------------------------------------------------------------

def _half_sq_dist(g, a, b):
    """Per-row 0.5*||a-b||^2; equals 1 - cos for unit rows, and is exactly
    zero (not just within rounding) when the rows coincide."""
    d = g.sub(a, b)
    return g.scale(g.rowdot(d, d), 0.5)


def _loss_nodes(g, pn, images_flat, tokens, key_positions, delta_node, u_node,
                alpha, tau):
    """Build L = L_cross + alpha * L_uni on one batch.

    images_flat is a constant leaf; delta_node (1,768) and u_node (1,32) carry
    the gradient. Perturbed images are clamped to [0,1] in-graph.
    """
    n = images_flat.shape[0]
    ones_col = g.leaf(np.ones((n, 1)))
    adv_imgs = g.clamp01(g.add(images_flat, g.affine(ones_col, delta_node)))
    img_adv = toyvlp.image_tower(g, pn, adv_imgs)
    img_clean = toyvlp.image_tower(g, pn, images_flat)
    txt_adv, _ = toyvlp.text_tower(g, pn, tokens, override=(key_positions, u_node))
    txt_clean, _ = toyvlp.text_tower(g, pn, tokens)
    l_cross = toyvlp.contrastive_node(g, img_adv, txt_adv, tau)
    l_uni = g.mean(g.add(_half_sq_dist(g, img_adv, img_clean),
                         _half_sq_dist(g, txt_adv, txt_clean)), 0)
    return g.add(l_cross, g.scale(l_uni, alpha)), l_cross, l_uni


def multimodal_loss(params: toyvlp.DualEncoderParams,
                    adv_images: np.ndarray, adv_tokens: np.ndarray,
                    clean_images: np.ndarray, clean_tokens: np.ndarray,
                    alpha: float) -> float:
    """L = J(perturbed pair) + alpha * mean[(1-cos image drift) + (1-cos text
    drift)], computed on already-perturbed arrays."""
    g = Graph()
    pn = toyvlp.param_leaves(g, params, requires_grad=False)
    img_adv = toyvlp.image_tower(g, pn, g.leaf(toyvlp.flatten_images(adv_images)))
    img_clean = toyvlp.image_tower(g, pn, g.leaf(toyvlp.flatten_images(clean_images)))
    txt_adv, _ = toyvlp.text_tower(g, pn, adv_tokens)
    txt_clean, _ = toyvlp.text_tower(g, pn, clean_tokens)
    l_cross = toyvlp.contrastive_node(g, img_adv, txt_adv, params.temperature)
    l_uni = g.mean(g.add(_half_sq_dist(g, img_adv, img_clean),
                         _half_sq_dist(g, txt_adv, txt_clean)), 0)
    return float(g.add(l_cross, g.scale(l_uni, alpha)).data)


# --------------------------------------------------------------------------
# optimization loops
# --------------------------------------------------------------------------

def _default_text_step(params: toyvlp.DualEncoderParams) -> float:
    table = params.tok_embed
    return 0.1 * float(np.sqrt(np.mean(table * table)))


def _augment_batch(images_flat, spec, rng):
    out = np.empty_like(images_flat)
    for i in range(images_flat.shape[0]):
        img = images_flat[i].reshape(synthdata.IMAGE_H, synthdata.IMAGE_W,
                                     synthdata.IMAGE_C)
        out[i] = synthdata.augment(img, spec, rng).ravel()
    return out


def do_uap(params: toyvlp.DualEncoderParams, train_set: synthdata.Dataset,
           config: AttackConfig, key_positions: np.ndarray | None = None,
           iteration_hook=None):
    """Direct sign-gradient optimization of the perturbation pair.

    Returns (Uap, log) where log has one record per iteration with the batch
    loss, the current l-inf norm of the image delta, and the iteration's
    wall-clock seconds.
    """
    config.validate()
    n = len(train_set)
    if n < config.batch:
        raise AttackError(f"batch {config.batch} exceeds dataset size {n}")
    if key_positions is None:
        key_positions = select_key_positions(params, train_set.tokens)
    text_step = (config.text_step_scale if config.text_step_scale is not None
                 else _default_text_step(params))
    rng = Rng(config.seed ^ _ATTACK_SALT)
    images_flat = toyvlp.flatten_images(train_set.images)

    delta = np.zeros(toyvlp.FLAT_IMAGE)
    u = params.tok_embed.mean(axis=0).copy()  # vocabulary-neutral start
    log = []
    iteration = 0
    for _ in range(config.epochs):
        order = list(range(n))
        rng.shuffle(order)
        for it in range(n // config.batch):
            t0 = time.perf_counter()
            idx = order[it * config.batch:(it + 1) * config.batch]
            batch_imgs = _augment_batch(images_flat[idx], config.aug, rng)
            g = Graph()
            pn = toyvlp.param_leaves(g, params, requires_grad=False)
            delta_leaf = g.leaf(delta.reshape(1, -1), requires_grad=True)
            u_leaf = g.leaf(u.reshape(1, -1), requires_grad=True)
            loss, _, _ = _loss_nodes(g, pn, g.leaf(batch_imgs),
                                     train_set.tokens[idx], key_positions[idx],
                                     delta_leaf, u_leaf, config.alpha,
                                     params.temperature)
            value = float(loss.data)
            if not np.isfinite(value):
                raise AttackError(f"non-finite loss at iteration {iteration}")
            g.backward(loss)
            g_v = delta_leaf.grad.ravel() if delta_leaf.grad is not None else np.zeros_like(delta)
            g_u = u_leaf.grad.ravel() if u_leaf.grad is not None else np.zeros_like(u)
            delta = np.clip(delta + config.beta * config.eps_v * np.sign(g_v),
                            -config.eps_v, config.eps_v)
            u = u + text_step * np.sign(g_u)
            log.append({
                "iteration": iteration,
                "loss": value,
                "delta_linf": float(np.abs(delta).max()),
                "seconds": time.perf_counter() - t0,
            })
            if iteration_hook is not None:
                iteration_hook(iteration, delta, u, value)
            iteration += 1
    uap = Uap(delta.reshape(synthdata.IMAGE_H, synthdata.IMAGE_W, synthdata.IMAGE_C),
              u, project_token(u, params), key_positions=key_positions)
    return uap, log


def project_token(u: np.ndarray, params: toyvlp.DualEncoderParams) -> int:
    """Nearest vocabulary token to u by cosine, excluding structural tokens."""
    table = params.tok_embed
    candidates = [w for w in range(synthdata.VOCAB_SIZE) if w not in SPECIAL_TOKENS]
    norms = np.sqrt((table[candidates] ** 2).sum(axis=1))
    u_norm = max(float(np.sqrt((u * u).sum())), 1e-30)
    cos = table[candidates] @ u / (np.maximum(norms, 1e-30) * u_norm)
    return int(candidates[int(np.argmax(cos))])


def init_generator(seed: int) -> GeneratorParams:
    rng = Rng(seed ^ _GEN_SALT)
    return GeneratorParams(
        z=np.array([rng.gauss(1.0) for _ in range(64)]),
        w1=np.array([rng.gauss(64 ** -0.5) for _ in range(64 * 256)]).reshape(64, 256),
        b1=np.zeros(256),
        w2=np.array([rng.gauss(256 ** -0.5) for _ in range(256 * 768)]).reshape(256, 768),
        b2=np.zeros(768),
    )


def generator_delta(gen: GeneratorParams, eps_v: float) -> np.ndarray:
    """Forward pass of the generator; tanh output keeps |delta| <= eps_v."""
    h = np.tanh(gen.z @ gen.w1 + gen.b1)
    return eps_v * np.tanh(h @ gen.w2 + gen.b2)


def generator_baseline(params: toyvlp.DualEncoderParams, train_set: synthdata.Dataset,
                       config: AttackConfig, key_positions: np.ndarray | None = None,
                       iteration_hook=None, gen_lr: float = 0.01):
    """Same loop as do_uap, but the image delta is emitted by a latent->image
    MLP and the MLP weights take the gradient step (plain SGD ascent)."""
    config.validate()
    n = len(train_set)
    if n < config.batch:
        raise AttackError(f"batch {config.batch} exceeds dataset size {n}")
    if key_positions is None:
        key_positions = select_key_positions(params, train_set.tokens)
    text_step = (config.text_step_scale if config.text_step_scale is not None
                 else _default_text_step(params))
    rng = Rng(config.seed ^ _ATTACK_SALT)
    gen = init_generator(config.seed)
    images_flat = toyvlp.flatten_images(train_set.images)

    u = params.tok_embed.mean(axis=0).copy()
    log = []
    iteration = 0
    for _ in range(config.epochs):
        order = list(range(n))
        rng.shuffle(order)
        for it in range(n // config.batch):
            t0 = time.perf_counter()
            idx = order[it * config.batch:(it + 1) * config.batch]
            batch_imgs = _augment_batch(images_flat[idx], config.aug, rng)
            g = Graph()
            pn = toyvlp.param_leaves(g, params, requires_grad=False)
            z_leaf = g.leaf(gen.z.reshape(1, -1))
            w1_leaf = g.leaf(gen.w1, requires_grad=True)
            b1_leaf = g.leaf(gen.b1, requires_grad=True)
            w2_leaf = g.leaf(gen.w2, requires_grad=True)
            b2_leaf = g.leaf(gen.b2, requires_grad=True)
            hidden = g.tanh(g.affine(z_leaf, w1_leaf, b1_leaf))
            delta_node = g.scale(g.tanh(g.affine(hidden, w2_leaf, b2_leaf)),
                                 config.eps_v)
            u_leaf = g.leaf(u.reshape(1, -1), requires_grad=True)
            loss, _, _ = _loss_nodes(g, pn, g.leaf(batch_imgs),
                                     train_set.tokens[idx], key_positions[idx],
                                     delta_node, u_leaf, config.alpha,
                                     params.temperature)
            value = float(loss.data)
            if not np.isfinite(value):
                raise AttackError(f"non-finite loss at iteration {iteration}")
            g.backward(loss)
            for leaf, arr in ((w1_leaf, gen.w1), (b1_leaf, gen.b1),
                              (w2_leaf, gen.w2), (b2_leaf, gen.b2)):
                if leaf.grad is not None:
                    arr += gen_lr * leaf.grad  # ascent
            g_u = u_leaf.grad.ravel() if u_leaf.grad is not None else np.zeros_like(u)
            u = u + text_step * np.sign(g_u)
            delta = generator_delta(gen, config.eps_v)
            log.append({
                "iteration": iteration,
                "loss": value,
                "delta_linf": float(np.abs(delta).max()),
                "seconds": time.perf_counter() - t0,
            })
            if iteration_hook is not None:
                iteration_hook(iteration, delta, u, value)
            iteration += 1
    delta = generator_delta(gen, config.eps_v)
    uap = Uap(delta.reshape(synthdata.IMAGE_H, synthdata.IMAGE_W, synthdata.IMAGE_C),
              u, project_token(u, params), key_positions=key_positions)
    return uap, log


# --------------------------------------------------------------------------
# artifact file
# --------------------------------------------------------------------------

def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode()


def _unb64(text: str, count: int) -> np.ndarray:
    raw = base64.b64decode(text.encode())
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != count:
        raise AttackError(f"artifact payload has {arr.size} values, expected {count}")
    return arr.copy()


def save_uap(uap: Uap, config: AttackConfig, wallclock_seconds: float,
             iterations: int, method: str, path) -> None:
    doc = {
        "version": _ARTIFACT_VERSION,
        "method": method,
        "eps_v": config.eps_v,
        "alpha": config.alpha,
        "beta": config.beta,
        "epochs": config.epochs,
        "seed": config.seed,
        "aug": config.aug.to_dict(),
        "delta_v": _b64(uap.delta_v),
        "delta_t_embed": _b64(uap.delta_t_embed),
        "delta_t_token": uap.delta_t_token,
        "key_position_policy": "saliency",
        "wallclock_seconds": wallclock_seconds,
        "iterations": iterations,
    }
    atomic_write_bytes(path, (canonical_dumps(doc) + "\n").encode())


def load_uap(path):
    """Returns (Uap, metadata dict)."""
    import json

    with open(path, "rb") as f:
        try:
            doc = json.loads(f.read().decode())
        except ValueError as exc:
            raise AttackError(f"{path}: not a valid artifact JSON: {exc}") from exc
    required = {"eps_v", "alpha", "beta", "epochs", "seed", "aug", "delta_v",
                "delta_t_embed", "delta_t_token", "key_position_policy",
                "wallclock_seconds", "iterations"}
    missing = required - set(doc)
    if missing:
        raise AttackError(f"{path}: artifact missing fields {sorted(missing)}")
    delta_v = _unb64(doc["delta_v"], toyvlp.FLAT_IMAGE).reshape(
        synthdata.IMAGE_H, synthdata.IMAGE_W, synthdata.IMAGE_C)
    u = _unb64(doc["delta_t_embed"], toyvlp.EMBED_DIM)
    token = doc["delta_t_token"]
    if token is not None:
        token = int(token)
        if token in SPECIAL_TOKENS or not 0 <= token < synthdata.VOCAB_SIZE:
            raise AttackError(f"{path}: delta_t_token {token} is not an eligible token")
    return Uap(delta_v, u, token), doc
