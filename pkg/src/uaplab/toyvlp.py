"""Toy aligned dual encoder: independent image and text towers compared by
cosine similarity, trained with a symmetric contrastive objective.

Image tower: sixteen 4x4 patches, each flattened to 48 values, projected by
a shared 48x32 affine, given a per-patch position vector, passed through
tanh, mean-pooled, then a 32->64->32 tanh MLP and L2 normalization. The
pre-pool tanh is load-bearing: with a purely linear patch stage, mean
pooling makes the tower blind to where a shape sits (the pooled vector is
the same for any placement of identical patch content), and retrieval of
position-bearing captions cannot work.

Text tower: token embedding + position embedding, tanh, mean over non-PAD
positions, then the same MLP shape. The pre-pool tanh matters here too:
a plain mean of token+position sums is order-blind for same-length
sentences. An override hook can replace the embedding at one position per
sequence with a supplied vector, which is how the continuous text
perturbation enters.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, fields, replace

import numpy as np

from . import synthdata
from .autodiff import Graph, Tensor
from .rng import Rng

EMBED_DIM = 32
HIDDEN_DIM = 64
PATCH = 4
N_PATCHES = 16
PATCH_DIM = PATCH * PATCH * synthdata.IMAGE_C  # 48
FLAT_IMAGE = synthdata.IMAGE_H * synthdata.IMAGE_W * synthdata.IMAGE_C  # 768
TEMPERATURE = 0.07

_INIT_SALT = 0x5EED1A171A17BEEF   # weight-init stream salt
_TRAIN_SALT = 0x7247A11C0FFEE000  # batch-shuffle stream salt

_MAGIC = b"DOUP"
_CKPT_VERSION = 2


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


class TrainingError(RuntimeError):
    """Training diverged or was asked to do something impossible."""


@dataclass
class DualEncoderParams:
    patch_w: np.ndarray    # (48, 32)
    patch_b: np.ndarray    # (32,)
    img_pos: np.ndarray    # (16, 32) per-patch position vectors
    img_w1: np.ndarray     # (32, 64)
    img_b1: np.ndarray     # (64,)
    img_w2: np.ndarray     # (64, 32)
    img_b2: np.ndarray     # (32,)
    tok_embed: np.ndarray  # (18, 32)
    pos_embed: np.ndarray  # (8, 32)
    txt_w1: np.ndarray     # (32, 64)
    txt_b1: np.ndarray     # (64,)
    txt_w2: np.ndarray     # (64, 32)
    txt_b2: np.ndarray     # (32,)
    temperature: float = TEMPERATURE

    def copy(self) -> "DualEncoderParams":
        return replace(self, **{
            f.name: getattr(self, f.name).copy()
            for f in fields(self) if f.name != "temperature"
        })


PARAM_SHAPES = {
    "patch_w": (PATCH_DIM, EMBED_DIM),
    "patch_b": (EMBED_DIM,),
    "img_pos": (N_PATCHES, EMBED_DIM),
    "img_w1": (EMBED_DIM, HIDDEN_DIM),
    "img_b1": (HIDDEN_DIM,),
    "img_w2": (HIDDEN_DIM, EMBED_DIM),
    "img_b2": (EMBED_DIM,),
    "tok_embed": (synthdata.VOCAB_SIZE, EMBED_DIM),
    "pos_embed": (synthdata.SEQ_LEN, EMBED_DIM),
    "txt_w1": (EMBED_DIM, HIDDEN_DIM),
    "txt_b1": (HIDDEN_DIM,),
    "txt_w2": (HIDDEN_DIM, EMBED_DIM),
    "txt_b2": (EMBED_DIM,),
}


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch: int = 64
    epochs: int = 30
    seed: int = 42

    def validate(self):
        if self.lr < 0.0:
            raise TrainingError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainingError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch < 2:
            raise TrainingError(f"contrastive training needs batch >= 2, got {self.batch}")
        if self.epochs < 0:
            raise TrainingError(f"epochs must be >= 0, got {self.epochs}")


def _gauss_array(rng: Rng, shape, sigma: float) -> np.ndarray:
    return np.array([rng.gauss(sigma) for _ in range(int(np.prod(shape)))]).reshape(shape)


def init_params(seed: int) -> DualEncoderParams:
    rng = Rng(seed ^ _INIT_SALT)
    vals = {}
    sigmas = {
        "patch_w": PATCH_DIM ** -0.5,
        "img_pos": 0.5,
        "img_w1": EMBED_DIM ** -0.5,
        "img_w2": HIDDEN_DIM ** -0.5,
        "tok_embed": 0.5,
        "pos_embed": 0.3,
        "txt_w1": EMBED_DIM ** -0.5,
        "txt_w2": HIDDEN_DIM ** -0.5,
    }
    for name, shape in PARAM_SHAPES.items():
        if name in sigmas:
            vals[name] = _gauss_array(rng, shape, sigmas[name])
        else:
            vals[name] = np.zeros(shape)
    return DualEncoderParams(**vals)


# --------------------------------------------------------------------------
# graph builders (shared by training, the attack, and plain encoding)
# --------------------------------------------------------------------------

def _patch_selectors():
    sels = []
    for j in range(N_PATCHES):
        py, px = divmod(j, 4)
        m = np.zeros((FLAT_IMAGE, PATCH_DIM))
        for r in range(PATCH):
            for c in range(PATCH):
                for ch in range(synthdata.IMAGE_C):
                    src = ((py * PATCH + r) * synthdata.IMAGE_W + (px * PATCH + c)) \
                        * synthdata.IMAGE_C + ch
                    dst = (r * PATCH + c) * synthdata.IMAGE_C + ch
                    m[src, dst] = 1.0
        sels.append(m)
    return sels


_PATCH_SELECT = _patch_selectors()


def flatten_images(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    return images.reshape(images.shape[0], FLAT_IMAGE)


def param_leaves(g: Graph, params: DualEncoderParams, requires_grad: bool) -> dict:
    pn = {}
    for name in PARAM_SHAPES:
        arr = getattr(params, name)
        if name == "img_pos":
            pn[name] = [g.leaf(arr[j], requires_grad) for j in range(N_PATCHES)]
        else:
            pn[name] = g.leaf(arr, requires_grad)
    return pn


def image_tower(g: Graph, pn: dict, x_flat: Tensor) -> Tensor:
    """x_flat: (n, 768) tensor (possibly perturbation-carrying) -> (n, 32) unit rows."""
    acc = None
    for j in range(N_PATCHES):
        pix = g.affine(x_flat, g.leaf(_PATCH_SELECT[j]))
        bias = g.add(pn["patch_b"], pn["img_pos"][j])
        feat = g.tanh(g.affine(pix, pn["patch_w"], bias))
        acc = feat if acc is None else g.add(acc, feat)
    pooled = g.scale(acc, 1.0 / N_PATCHES)
    h = g.tanh(g.affine(pooled, pn["img_w1"], pn["img_b1"]))
    out = g.affine(h, pn["img_w2"], pn["img_b2"])
    return g.normalize_rows(out)


def _token_onehot(tokens: np.ndarray) -> np.ndarray:
    n, seq = tokens.shape
    onehot = np.zeros((n * seq, synthdata.VOCAB_SIZE))
    onehot[np.arange(n * seq), tokens.ravel()] = 1.0
    return onehot


def _nonpad_mean_weights(tokens: np.ndarray) -> np.ndarray:
    n, seq = tokens.shape
    w = np.zeros((n, n * seq))
    for i in range(n):
        live = np.flatnonzero(tokens[i] != synthdata.PAD)
        w[i, i * seq + live] = 1.0 / live.size
    return w


def text_tower(g: Graph, pn: dict, tokens: np.ndarray, override=None):
    """tokens: (n, 8) ints -> (embeddings (n, 32) unit rows, per-position
    embedding node (n*8, 32) whose grad gives token saliency).

    override = (positions, vec_tensor) replaces the position embedding row of
    sequence i at positions[i] with the (1, 32) graph tensor vec_tensor.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n, seq = tokens.shape
    onehot = g.leaf(_token_onehot(tokens))
    tok_e = g.affine(onehot, pn["tok_embed"])
    if override is not None:
        # replace the token embedding itself; the position vector still adds,
        # so overriding with the original token's embedding is a no-op
        positions, vec = override
        positions = np.asarray(positions, dtype=np.int64)
        if positions.shape != (n,) or (positions < 0).any() or (positions >= seq).any():
            raise ValueError(f"override positions out of range for seq length {seq}")
        rows = np.arange(n) * seq + positions
        keep = np.ones((n * seq, EMBED_DIM))
        keep[rows] = 0.0
        place = np.zeros((n * seq, 1))
        place[rows] = 1.0
        tok_e = g.add(g.mul(tok_e, g.leaf(keep)), g.affine(g.leaf(place), vec))
    possel = g.leaf(np.tile(np.eye(synthdata.SEQ_LEN), (n, 1)))
    pos_e = g.affine(possel, pn["pos_embed"])
    embs = g.add(tok_e, pos_e)
    # tanh before pooling: a plain mean of token+position sums is blind to
    # token order (the position contribution is the same constant for every
    # same-length sentence), which collides captions that differ only in
    # which color binds to which shape
    feats = g.tanh(embs)
    pooled = g.affine(g.leaf(_nonpad_mean_weights(tokens)), feats)
    h = g.tanh(g.affine(pooled, pn["txt_w1"], pn["txt_b1"]))
    out = g.affine(h, pn["txt_w2"], pn["txt_b2"])
    return g.normalize_rows(out), embs


def contrastive_node(g: Graph, img_emb: Tensor, txt_emb: Tensor, tau: float) -> Tensor:
    """Symmetric softmax cross-entropy over the scaled similarity matrix."""
    m = img_emb.shape[0]
    s = g.scale(g.affine(img_emb, g.transpose(txt_emb)), 1.0 / tau)
    diag = np.arange(m)
    return g.scale(g.add(g.softmax_xent(s, diag), g.softmax_xent(g.transpose(s), diag)),
                   0.5)


# --------------------------------------------------------------------------
# public encoding / loss / training
# --------------------------------------------------------------------------

def encode_image(params: DualEncoderParams, images: np.ndarray) -> np.ndarray:
    g = Graph()
    pn = param_leaves(g, params, requires_grad=False)
    emb = image_tower(g, pn, g.leaf(flatten_images(images)))
    return emb.data.copy()


def encode_text(params: DualEncoderParams, tokens: np.ndarray,
                override_positions=None, override_vector=None) -> np.ndarray:
    g = Graph()
    pn = param_leaves(g, params, requires_grad=False)
    override = None
    if override_positions is not None:
        vec = g.leaf(np.asarray(override_vector, dtype=np.float64).reshape(1, EMBED_DIM))
        override = (override_positions, vec)
    emb, _ = text_tower(g, pn, tokens, override)
    return emb.data.copy()


def contrastive_loss(params: DualEncoderParams, images: np.ndarray,
                     tokens: np.ndarray) -> float:
    g = Graph()
    pn = param_leaves(g, params, requires_grad=False)
    img_emb = image_tower(g, pn, g.leaf(flatten_images(images)))
    txt_emb, _ = text_tower(g, pn, tokens)
    return float(contrastive_node(g, img_emb, txt_emb, params.temperature).data)


def _apply_sgd(params, vel, pn, lr, momentum):
    for name in PARAM_SHAPES:
        arr = getattr(params, name)
        if name == "img_pos":
            grad = np.stack([
                leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
                for leaf in pn[name]
            ])
        else:
            leaf = pn[name]
            grad = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        vel[name] = momentum * vel[name] - lr * grad
        arr += vel[name]


def train(params: DualEncoderParams, train_set: synthdata.Dataset,
          config: TrainConfig):
    """SGD with momentum on the contrastive loss; returns (trained params,
    per-epoch mean loss curve). Fully deterministic given the seed."""
    config.validate()
    n = len(train_set)
    if n == 0:
        raise TrainingError("training set is empty")
    if n < config.batch:
        raise TrainingError(f"batch {config.batch} exceeds dataset size {n}")
    params = params.copy()
    vel = {name: np.zeros(PARAM_SHAPES[name]) for name in PARAM_SHAPES}
    rng = Rng(config.seed ^ _TRAIN_SALT)
    images_flat = flatten_images(train_set.images)
    curve = []
    for epoch in range(config.epochs):
        order = list(range(n))
        rng.shuffle(order)
        iters = n // config.batch
        losses = []
        for it in range(iters):
            idx = order[it * config.batch:(it + 1) * config.batch]
            g = Graph()
            pn = param_leaves(g, params, requires_grad=True)
            img_emb = image_tower(g, pn, g.leaf(images_flat[idx]))
            txt_emb, _ = text_tower(g, pn, train_set.tokens[idx])
            loss = contrastive_node(g, img_emb, txt_emb, params.temperature)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch} iteration {it}")
            g.backward(loss)
            _apply_sgd(params, vel, pn, config.lr, config.momentum)
            losses.append(value)
        curve.append(float(np.mean(losses)) if losses else float("nan"))
    return params, curve


# --------------------------------------------------------------------------
# checkpoint file
# --------------------------------------------------------------------------

def save_checkpoint(params: DualEncoderParams, path) -> None:
    """Named f64 sections in a fixed order, CRC32 trailer."""
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<H", _CKPT_VERSION)
    sections = [(name, getattr(params, name)) for name in PARAM_SHAPES]
    sections.append(("temperature", np.array([params.temperature])))
    for name, arr in sections:
        payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        out += struct.pack("<H", len(name))
        out += name.encode("ascii")
        out += struct.pack("<I", arr.size)
        out += payload
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as f:
        f.write(out)


def load_checkpoint(path) -> DualEncoderParams:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 10:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc_stored:
        raise CheckpointError(f"{path}: CRC mismatch")
    offset = 6
    end = len(blob) - 4
    vals = {}
    temperature = None
    while offset < end:
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("ascii")
        offset += name_len
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        nbytes = count * 8
        if offset + nbytes > end:
            raise CheckpointError(f"{path}: truncated tensor section {name!r}")
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).copy()
        offset += nbytes
        if name == "temperature":
            temperature = float(data[0])
        elif name in PARAM_SHAPES:
            if count != int(np.prod(PARAM_SHAPES[name])):
                raise CheckpointError(f"{path}: section {name!r} has wrong size {count}")
            vals[name] = data.reshape(PARAM_SHAPES[name])
        else:
            raise CheckpointError(f"{path}: unknown section {name!r}")
    missing = set(PARAM_SHAPES) - set(vals)
    if missing or temperature is None:
        raise CheckpointError(f"{path}: missing sections {sorted(missing) or ['temperature']}")
    return DualEncoderParams(temperature=temperature, **vals)
