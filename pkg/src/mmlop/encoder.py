"""Miniature frozen dual encoder with deep prompt injection.

Both towers are pre-LN transformers. The vision tower reads the class-token
slot, the text tower reads the EOS slot (text attention is causal). Prompt
tokens are inserted before the class token (vision) and right after SOS
(text) at layer 1, and at every layer ``l <= depth`` the prompt slots are
overwritten with the freshly materialized prompts for that layer.

Weights are drawn from a seeded normal. The two output projections are then
fitted in closed form (ridge regression onto a shared latent space) so the
unprompted towers behave like an aligned, pretrained dual encoder.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .prompts import PromptStack, materialize
from .tensor import ShapeError, Tensor

MAGIC = b"MMBB1"
# magic, 12 int64 dims/flags, 6 float64 settings, fit_samples
_HEADER_END = 5 + 12 * 8 + 6 * 8 + 8


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    d_in: int = 8
    d_v: int = 32
    d_t: int = 24
    d_out: int = 16
    n_layers: int = 4
    n_heads: int = 2
    n_patches: int = 8
    n_words: int = 3
    n_templates: int = 60
    mlp_ratio: int = 4
    tau: float = 0.01
    seed: int = 0
    fit_samples: int = 2048
    fit_noise: float = 0.5
    ridge: float = 1e-3
    embed_std: float = 0.5
    branch_scale: float = 0.5
    template_spread: float = 0.2
    identity: bool = False

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(f.default, (float, bool)) or f.name == "seed":
                continue
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise BackboneError(f"{f.name} must be a positive integer, got {value!r}")
        if not self.tau > 0:
            raise BackboneError(f"tau must be positive, got {self.tau}")
        if self.d_v % self.n_heads or self.d_t % self.n_heads:
            raise BackboneError(f"n_heads={self.n_heads} must divide d_v={self.d_v} and d_t={self.d_t}")
        if self.identity and not (self.d_in == self.d_v == self.d_t == self.d_out):
            raise BackboneError("identity backbone needs d_in == d_v == d_t == d_out")

    @property
    def text_len(self) -> int:
        # SOS, template words, class word, EOS
        return self.n_words + 3


_BLOCK_KEYS = ("ln1_g", "ln1_b", "Wq", "Wk", "Wv", "Wo", "ln2_g", "ln2_b", "W1", "b1", "W2", "b2")


def _param_shapes(cfg: BackboneConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declared order of every frozen array; save, load and checksum follow it."""
    out: list[tuple[str, tuple[int, ...]]] = []
    for tower, d, n_pos in (("v", cfg.d_v, cfg.n_patches + 1), ("t", cfg.d_t, cfg.text_len)):
        h = cfg.mlp_ratio * d
        if tower == "v":
            out += [("v.patch_proj", (cfg.d_in, d)), ("v.cls", (d,))]
        else:
            out += [("t.tok_proj", (cfg.d_in, d)), ("t.sos", (d,)), ("t.eos", (d,))]
        out.append((f"{tower}.pos", (n_pos, d)))
        for i in range(cfg.n_layers):
            shapes = {
                "ln1_g": (d,), "ln1_b": (d,), "Wq": (d, d), "Wk": (d, d), "Wv": (d, d), "Wo": (d, d),
                "ln2_g": (d,), "ln2_b": (d,), "W1": (d, h), "b1": (h,), "W2": (h, d), "b2": (d,),
            }
            out += [(f"{tower}.block{i}.{k}", shapes[k]) for k in _BLOCK_KEYS]
        out += [(f"{tower}.ln_out_g", (d,)), (f"{tower}.ln_out_b", (d,)), (f"{tower}.proj", (d, cfg.d_out))]
    out.append(("templates", (cfg.n_templates, cfg.n_words, cfg.d_in)))
    return out


@dataclass(frozen=True)
class FrozenBackbone:
    config: BackboneConfig
    params: dict[str, np.ndarray]

    @property
    def tau(self) -> float:
        return self.config.tau

    @property
    def d_v(self) -> int:
        return self.config.d_v

    @property
    def d_t(self) -> int:
        return self.config.d_t

    @property
    def templates(self) -> np.ndarray:
        return self.params["templates"]

    def payload(self) -> bytes:
        chunks = [struct.pack("<d", self.config.tau)]
        for name, _ in _param_shapes(self.config):
            chunks.append(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return b"".join(chunks)

    def checksum(self) -> str:
        return hashlib.sha256(self.payload()).hexdigest()


def _freeze(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    for arr in params.values():
        arr.flags.writeable = False
    return params


def build_backbone(cfg: BackboneConfig | None = None) -> FrozenBackbone:
    cfg = cfg or BackboneConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    word_std = 1.0 / np.sqrt(cfg.d_in)
    # templates are small perturbations of one base phrase
    base_template = rng.normal(0.0, word_std, size=(cfg.n_words, cfg.d_in))
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.endswith("_b") or leaf in ("b1", "b2"):
            arr = np.zeros(shape)
        elif name == "templates":
            arr = base_template + cfg.template_spread * rng.normal(0.0, word_std, size=shape)
        elif leaf in ("cls", "sos", "eos", "pos"):
            arr = rng.normal(0.0, cfg.embed_std, size=shape)
        else:
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
            if leaf in ("Wo", "W2"):
                arr *= cfg.branch_scale
        params[name] = arr
    if cfg.identity:
        for key in ("v.patch_proj", "t.tok_proj", "v.proj", "t.proj"):
            params[key] = np.eye(cfg.d_in)
    else:
        _fit_projections(cfg, params, rng)
    return FrozenBackbone(cfg, _freeze(params))


def _fit_projections(cfg: BackboneConfig, params: dict[str, np.ndarray], rng: np.random.Generator) -> None:
    """Ridge-fit both output projections onto a common latent target space."""
    n = cfg.fit_samples
    z = rng.normal(size=(n, cfg.d_in))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    target_map = rng.normal(size=(cfg.d_in, cfg.d_out)) / np.sqrt(cfg.d_in)
    target = z @ target_map
    patches = z[:, None, :] + cfg.fit_noise * rng.normal(size=(n, cfg.n_patches, cfg.d_in)) / np.sqrt(cfg.d_in)
    tpl = params["templates"][rng.integers(0, cfg.n_templates, size=n)]
    words = np.concatenate([tpl, z[:, None, :]], axis=1)
    tmp = FrozenBackbone(cfg, params)
    for tower, x in (("v", _vision_tokens(tmp, patches)), ("t", _text_tokens(tmp, words))):
        h = _tower_pre_projection(tmp, tower, x, None).data
        gram = h.T @ h + cfg.ridge * n * np.eye(h.shape[1])
        params[f"{tower}.proj"] = np.linalg.solve(gram, h.T @ target)


# ---------------------------------------------------------------- serialization


def save_backbone(bb: FrozenBackbone, path: str | Path) -> None:
    c = bb.config
    header = struct.pack(
        "<12q", c.d_in, c.d_v, c.d_t, c.d_out, c.n_layers, c.n_heads, c.n_patches,
        c.n_words, c.n_templates, c.mlp_ratio, c.seed, int(c.identity),
    ) + struct.pack("<6d", c.tau, c.fit_noise, c.ridge, c.embed_std, c.branch_scale, c.template_spread) + struct.pack(
        "<q", c.fit_samples
    )
    payload = bb.payload()
    Path(path).write_bytes(MAGIC + header + payload + hashlib.sha256(payload).digest())


def load_backbone(path: str | Path) -> FrozenBackbone:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise BackboneError(f"{path}: bad magic {raw[:5]!r}")
    if len(raw) < _HEADER_END + 8 + 32:
        raise BackboneError(f"{path}: file too short ({len(raw)} bytes)")
    ints = struct.unpack("<12q", raw[5:101])
    floats = struct.unpack("<6d", raw[101:149])
    (fit_samples,) = struct.unpack("<q", raw[149:_HEADER_END])
    body, trailer = raw[_HEADER_END:-32], raw[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise BackboneError(f"{path}: checksum mismatch")
    int_names = ("d_in", "d_v", "d_t", "d_out", "n_layers", "n_heads", "n_patches", "n_words", "n_templates", "mlp_ratio", "seed")
    float_names = ("tau", "fit_noise", "ridge", "embed_std", "branch_scale", "template_spread")
    cfg = BackboneConfig(
        **dict(zip(int_names, ints[:11])), identity=bool(ints[11]), **dict(zip(float_names, floats)), fit_samples=fit_samples
    )
    (tau,) = struct.unpack("<d", body[:8])
    if tau != cfg.tau:
        raise BackboneError(f"{path}: header tau {cfg.tau} disagrees with payload tau {tau}")
    offset = 8
    params = {}
    for name, shape in _param_shapes(cfg):
        size = int(np.prod(shape)) * 8
        if offset + size > len(body):
            raise BackboneError(f"{path}: payload truncated at {name}")
        params[name] = np.frombuffer(body[offset : offset + size], dtype="<f8").reshape(shape).astype(np.float64)
        offset += size
    if offset != len(body):
        raise BackboneError(f"{path}: {len(body) - offset} trailing payload bytes")
    return FrozenBackbone(cfg, _freeze(params))


# ---------------------------------------------------------------- sequences


@dataclass(frozen=True)
class TokenSequence:
    """Raw content tokens of one modality, batched as (B, n, d_in).

    Vision content is the patch list; text content is template words plus
    the class word. Special tokens (class token, SOS, EOS) are added by the
    backbone, so their positions depend only on the prompt length.
    """

    modality: str
    tokens: np.ndarray

    def __post_init__(self):
        if self.modality not in ("vision", "text"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.tokens.ndim != 3:
            raise ShapeError(f"tokens must be (batch, n, width), got {self.tokens.shape}")

    def special_indices(self, n_prompts: int = 0) -> dict[str, int]:
        if self.modality == "vision":
            return {"cls": n_prompts}
        return {"sos": 0, "eos": self.tokens.shape[1] + 1 + n_prompts}


def vision_sequence(patches: np.ndarray) -> TokenSequence:
    patches = np.asarray(patches, dtype=np.float64)
    return TokenSequence("vision", patches[None] if patches.ndim == 2 else patches)


def text_sequence(class_words: np.ndarray, template: np.ndarray) -> TokenSequence:
    """Template words followed by the class word, one row per class."""
    class_words = np.atleast_2d(np.asarray(class_words, dtype=np.float64))
    template = np.asarray(template, dtype=np.float64)
    tpl = np.broadcast_to(template, (class_words.shape[0],) + template.shape)
    return TokenSequence("text", np.concatenate([tpl, class_words[:, None, :]], axis=1))


def _vision_tokens(bb: FrozenBackbone, patches: np.ndarray) -> np.ndarray:
    p = bb.params
    x = patches @ p["v.patch_proj"]
    cls = np.broadcast_to(p["v.cls"], (x.shape[0], 1, x.shape[2]))
    return np.concatenate([cls, x], axis=1) + p["v.pos"][: x.shape[1] + 1]


def _text_tokens(bb: FrozenBackbone, words: np.ndarray) -> np.ndarray:
    p = bb.params
    x = words @ p["t.tok_proj"]
    b, _, d = x.shape
    sos = np.broadcast_to(p["t.sos"], (b, 1, d))
    eos = np.broadcast_to(p["t.eos"], (b, 1, d))
    seq = np.concatenate([sos, x, eos], axis=1)
    if seq.shape[1] > p["t.pos"].shape[0]:
        raise ShapeError(f"text sequence of {seq.shape[1]} tokens exceeds context {p['t.pos'].shape[0]}")
    return seq + p["t.pos"][: seq.shape[1]]


# ---------------------------------------------------------------- transformer


def _block(bb: FrozenBackbone, prefix: str, x: Tensor, causal: bool) -> Tensor:
    p = bb.params
    w = {k: p[f"{prefix}.{k}"] for k in _BLOCK_KEYS}
    d = x.shape[-1]
    n_heads = bb.config.n_heads
    dh = d // n_heads
    n = x.shape[-2]
    h = tn.layer_norm(x, w["ln1_g"], w["ln1_b"])
    mask = np.triu(np.full((n, n), -1e9), k=1) if causal else None
    attn = None
    for head in range(n_heads):
        cols = slice(head * dh, (head + 1) * dh)
        q = h @ w["Wq"][:, cols]
        k = h @ w["Wk"][:, cols]
        v = h @ w["Wv"][:, cols]
        scores = tn.scale(q @ tn.transpose(k), 1.0 / np.sqrt(dh))
        if mask is not None:
            scores = scores + mask
        out = (tn.softmax(scores) @ v) @ w["Wo"][cols, :]
        attn = out if attn is None else attn + out
    x = x + attn
    h = tn.layer_norm(x, w["ln2_g"], w["ln2_b"])
    return x + (tn.gelu(h @ w["W1"] + w["b1"]) @ w["W2"] + w["b2"])


def _broadcast_prompt(prompt: Tensor, batch: int) -> Tensor:
    return tn.add(np.zeros((batch, 1, 1)), prompt)


def _tower_pre_projection(bb: FrozenBackbone, tower: str, x0: np.ndarray, stack: PromptStack | None) -> Tensor:
    """Run one tower and return the normalized read-out token before projection."""
    depth = 0 if stack is None else stack.depth
    n_prompt = 0
    if stack is not None and depth > 0:
        n_prompt = stack.config.v_length if tower == "v" else stack.config.length
    prompted = depth > 0 and n_prompt > 0
    if depth > bb.config.n_layers:
        raise ShapeError(f"prompt depth {depth} exceeds backbone depth {bb.config.n_layers}")
    batch = x0.shape[0]
    x: Tensor = Tensor(x0)
    for layer in range(1, bb.config.n_layers + 1):
        if prompted and layer <= depth:
            pv, pt = materialize(stack, layer)
            prompt = _broadcast_prompt(pv if tower == "v" else pt, batch)
            if tower == "v":
                rest = x if layer == 1 else tn.slice_tokens(x, n_prompt)
                x = tn.concat([prompt, rest], axis=1)
            else:
                head = tn.slice_tokens(x, 0, 1)
                rest = tn.slice_tokens(x, 1) if layer == 1 else tn.slice_tokens(x, 1 + n_prompt)
                x = tn.concat([head, prompt, rest], axis=1)
        x = _block(bb, f"{tower}.block{layer - 1}", x, causal=tower == "t")
    read = n_prompt if tower == "v" and prompted else (0 if tower == "v" else -1)
    token = tn.take(x, (slice(None), read, slice(None)))
    p = bb.params
    return tn.layer_norm(token, p[f"{tower}.ln_out_g"], p[f"{tower}.ln_out_b"])


def _check_stack(bb: FrozenBackbone, stack: PromptStack | None) -> None:
    if stack is None:
        return
    if stack.config.d_v != bb.d_v or stack.config.d_t != bb.d_t:
        raise ShapeError(
            f"prompt widths (d_v={stack.config.d_v}, d_t={stack.config.d_t}) "
            f"do not match backbone (d_v={bb.d_v}, d_t={bb.d_t})"
        )


def _as_sequence(x, modality: str) -> tuple[TokenSequence, bool]:
    if isinstance(x, TokenSequence):
        seq = x
        single = False
    else:
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 2
        seq = TokenSequence(modality, arr[None] if single else arr)
    if seq.modality != modality:
        raise ShapeError(f"expected a {modality} sequence, got {seq.modality}")
    return seq, single


def encode_image(bb: FrozenBackbone, stack: PromptStack | None, x) -> Tensor:
    """Unit-norm image features, shape (B, d_out); (d_out,) for a single 2-D input."""
    seq, single = _as_sequence(x, "vision")
    _check_stack(bb, stack)
    if seq.tokens.shape[-1] != bb.config.d_in:
        raise ShapeError(f"patch width {seq.tokens.shape[-1]} != backbone d_in {bb.config.d_in}")
    h = _tower_pre_projection(bb, "v", _vision_tokens(bb, seq.tokens), stack)
    f = tn.l2_normalize(h @ bb.params["v.proj"])
    return tn.take(f, 0) if single else f


def encode_text(bb: FrozenBackbone, stack: PromptStack | None, y) -> Tensor:
    """Unit-norm text features read from the EOS slot, shape (B, d_out)."""
    seq, single = _as_sequence(y, "text")
    _check_stack(bb, stack)
    if seq.tokens.shape[-1] != bb.config.d_in:
        raise ShapeError(f"word width {seq.tokens.shape[-1]} != backbone d_in {bb.config.d_in}")
    h = _tower_pre_projection(bb, "t", _text_tokens(bb, seq.tokens), stack)
    g = tn.l2_normalize(h @ bb.params["t.proj"])
    return tn.take(g, 0) if single else g


def encode_classes(bb: FrozenBackbone, stack: PromptStack | None, class_words: np.ndarray, template_index: int = 0) -> Tensor:
    """Prompted (or plain) text features for every class under one template."""
    return encode_text(bb, stack, text_sequence(class_words, bb.templates[template_index]))


# ---------------------------------------------------------------- zero-shot


@dataclass(frozen=True)
class ZeroShotAnchor:
    features: np.ndarray
    n_templates: int

    @property
    def n_classes(self) -> int:
        return self.features.shape[0]


def build_anchor(bb: FrozenBackbone, class_words: np.ndarray, templates: Sequence[np.ndarray] | np.ndarray | None = None) -> ZeroShotAnchor:
    """Template-ensembled class features: normalize(mean_t encode_text(t + class))."""
    templates = bb.templates if templates is None else np.asarray(templates, dtype=np.float64)
    if len(templates) == 0:
        raise BackboneError("build_anchor needs at least one template")
    class_words = np.atleast_2d(np.asarray(class_words, dtype=np.float64))
    total = None
    for tpl in templates:
        g = encode_text(bb, None, text_sequence(class_words, tpl)).data
        total = g if total is None else total + g
    mean = total / len(templates)
    return ZeroShotAnchor(mean / np.linalg.norm(mean, axis=1, keepdims=True), len(templates))


def zero_shot_predict(f: np.ndarray, anchor: ZeroShotAnchor | np.ndarray, tau: float) -> np.ndarray:
    """Class probabilities softmax(cos(f, g_k) / tau) for unit-norm ``f``."""
    feats = anchor.features if isinstance(anchor, ZeroShotAnchor) else np.asarray(anchor)
    if feats.shape[0] == 0:
        raise BackboneError("zero_shot_predict needs at least one class")
    sims = np.asarray(f) @ feats.T
    return tn.softmax(sims, tau).data


def config_dict(cfg: BackboneConfig) -> dict:
    return asdict(cfg)
