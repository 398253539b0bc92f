"""A small, seeded, never-trained MM-DiT used as the denoising backbone.

Toy architecture choices (not claimed to match any production model):

* Image tokens are the flattened latent grid projected to ``dim``; prompt tokens
  are unit-norm word embeddings.  A sinusoidal time embedding is added to all
  tokens.
* Every block is pre-norm (parameter-free layer norm), joint attention with a
  residual, then a tanh-GELU MLP with a residual.
* Multi-stream blocks keep separate Q/K/V/output/MLP weights for text and image
  tokens; single-stream blocks share one set.  Multi-stream blocks come first.
* The velocity is a linear read-out of the final normalised image tokens.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import check_finite, check_latent, check_seed
from .attention import AttentionState, attend, softmax_rows
from .exceptions import ContractError
from .positional import DEFAULT_ROPE_BASE, apply_rotary, image_positions, rotation_angles, text_positions

TIME_FEATURES = 16


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    num_heads: int = 4
    head_dim: int = 16
    num_multi_stream_blocks: int = 2
    num_single_stream_blocks: int = 2
    image_grid: tuple = (16, 16)
    max_prompt_len: int = 16
    latent_channels: int = 16
    weight_seed: int = 0
    rope_base: float = DEFAULT_ROPE_BASE
    mlp_ratio: int = 2
    zero_output: bool = False

    def __post_init__(self):
        object.__setattr__(self, "image_grid", tuple(int(g) for g in self.image_grid))
        if self.dim != self.num_heads * self.head_dim:
            raise ContractError(
                f"dim ({self.dim}) must equal num_heads * head_dim ({self.num_heads * self.head_dim})"
            )
        if self.head_dim % 4:
            raise ContractError("head_dim must be divisible by 4 for two-axis rotary encoding")
        if min(self.num_multi_stream_blocks, self.num_single_stream_blocks) < 0:
            raise ContractError("block counts must be non-negative")
        if len(self.image_grid) != 2 or min(self.image_grid) < 1:
            raise ContractError(f"invalid image_grid {self.image_grid}")
        check_seed(self.weight_seed, "weight_seed")

    @property
    def num_blocks(self):
        return self.num_multi_stream_blocks + self.num_single_stream_blocks

    def block_kind(self, index):
        return "multi" if index < self.num_multi_stream_blocks else "single"

    @property
    def latent_shape(self):
        return (*self.image_grid, self.latent_channels)

    def to_dict(self):
        d = asdict(self)
        d["image_grid"] = list(self.image_grid)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ContractError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class TokenSequence:
    words: tuple
    tokens: tuple
    embeddings: np.ndarray = field(repr=False)
    subject_index: int | None = None

    def __post_init__(self):
        if self.subject_index is not None and not 0 <= self.subject_index < len(self.tokens):
            raise ContractError(f"subject_index {self.subject_index} out of bounds")

    @property
    def positions(self):
        return np.arange(len(self.tokens))

    def __len__(self):
        return len(self.tokens)


def token_id(word):
    """Stable 64-bit id of a word (BLAKE2b digest)."""
    return int.from_bytes(hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest(), "little")


def word_embedding(word, dim, weight_seed):
    tid = token_id(word)
    seq = np.random.SeedSequence([int(weight_seed) & 0xFFFFFFFF, int(weight_seed) >> 32,
                                  tid & 0xFFFFFFFF, tid >> 32])
    vec = np.random.Generator(np.random.Philox(seq)).standard_normal(dim)
    return vec / np.linalg.norm(vec)


def embed_prompt(words, config, subject=None):
    """Embed a word list; ``subject`` names the added-object word, if any.

    A ``subject`` not present in the prompt leaves ``subject_index`` unset.
    """
    if isinstance(words, str):
        words = words.split()
    words = tuple(str(w) for w in words)
    if not words:
        raise ContractError("prompt must contain at least one word")
    if len(words) > config.max_prompt_len:
        raise ContractError(f"prompt has {len(words)} words, max is {config.max_prompt_len}")
    emb = np.stack([word_embedding(w, config.dim, config.weight_seed) for w in words])
    idx = None
    if subject is not None and subject in words:
        idx = len(words) - 1 - words[::-1].index(subject)
    return TokenSequence(words, tuple(token_id(w) for w in words), emb, idx)


def layer_norm(x, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def time_features(t_label):
    half = TIME_FEATURES // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    arg = float(t_label) * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)])


def _split_heads(x, heads):
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * d)


class ToyMMDiT:
    """Seeded Gaussian-initialised MM-DiT.  Weights are read-only after construction."""

    def __init__(self, config=None, weights=None):
        self.config = config or ModelConfig()
        self.weights = weights if weights is not None else self._init_weights()
        for arr in self.weights.values():
            arr.setflags(write=False)
        self._streams = {}
        for i in range(self.config.num_blocks):
            for group in ("txt", "img"):
                prefix = f"blocks.{i}.{group}." if self.config.block_kind(i) == "multi" else f"blocks.{i}.shared."
                self._streams[i, group] = {
                    k[len(prefix):]: v for k, v in self.weights.items() if k.startswith(prefix)
                }

    # -- weights ---------------------------------------------------------------

    def _init_weights(self):
        cfg = self.config
        rng = np.random.Generator(np.random.Philox(cfg.weight_seed))
        d, hid, c = cfg.dim, cfg.dim * cfg.mlp_ratio, cfg.latent_channels
        depth_scale = 1.0 / math.sqrt(2 * max(cfg.num_blocks, 1))

        def mat(n_in, n_out, scale=1.0):
            return rng.standard_normal((n_in, n_out)) * (scale / math.sqrt(n_in))

        w = {"in_proj": mat(c, d), "time_proj": mat(TIME_FEATURES, d)}

        def stream(prefix):
            w[f"{prefix}.wq"] = mat(d, d)
            w[f"{prefix}.wk"] = mat(d, d)
            w[f"{prefix}.wv"] = mat(d, d)
            w[f"{prefix}.wo"] = mat(d, d, depth_scale)
            w[f"{prefix}.w1"] = mat(d, hid)
            w[f"{prefix}.w2"] = mat(hid, d, depth_scale)

        for i in range(cfg.num_blocks):
            if cfg.block_kind(i) == "multi":
                stream(f"blocks.{i}.txt")
                stream(f"blocks.{i}.img")
            else:
                stream(f"blocks.{i}.shared")
        w["out_proj"] = np.zeros((d, c)) if cfg.zero_output else mat(d, c)
        return w

    def stream_weights(self, block, group):
        """Weight dict for ``group`` in {'txt', 'img'}; single-stream blocks share one set."""
        return self._streams[block, group]

    def save_weights(self, bin_path, manifest_path):
        """Flat little-endian float64 blob plus a JSON manifest of (name, shape, offset)."""
        entries, offset = [], 0
        with open(bin_path, "wb") as fh:
            for name in sorted(self.weights):
                arr = np.ascontiguousarray(self.weights[name], dtype="<f8")
                fh.write(arr.tobytes())
                entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
                offset += arr.nbytes
        with open(manifest_path, "w") as fh:
            json.dump({"config": self.config.to_dict(), "dtype": "<f8", "tensors": entries}, fh, indent=2)

    @classmethod
    def load_weights(cls, bin_path, manifest_path):
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        blob = open(bin_path, "rb").read()
        weights = {}
        for e in manifest["tensors"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"])
            weights[e["name"]] = arr.astype(np.float64)
        return cls(ModelConfig.from_dict(manifest["config"]), weights)

    # -- forward ---------------------------------------------------------------

    def _embed(self, x_t, prompt, t_label):
        cfg = self.config
        x = check_latent(x_t, grid=cfg.image_grid, name="x_t")
        if x.shape[2] != cfg.latent_channels:
            raise ContractError(f"latent has {x.shape[2]} channels, expected {cfg.latent_channels}")
        if prompt.embeddings.shape[1] != cfg.dim:
            raise ContractError("prompt embedding width does not match model dim")
        temb = time_features(t_label) @ self.weights["time_proj"]
        h_img = x.reshape(-1, cfg.latent_channels) @ self.weights["in_proj"] + temb
        h_txt = prompt.embeddings + temb
        return h_txt, h_img

    def _angles(self, n_txt, offset=(0, 0)):
        cfg = self.config
        return (
            rotation_angles(text_positions(n_txt), cfg.head_dim, cfg.rope_base),
            rotation_angles(image_positions(cfg.image_grid, offset), cfg.head_dim, cfg.rope_base),
        )

    def _qkv(self, block, n_txt, n_img, angles):
        """Projected, rotated per-head q/k/v for normalised token groups."""
        heads = self.config.num_heads
        out = {}
        for group, x, ang in (("p", n_txt, angles[0]), ("img", n_img, angles[1])):
            w = self.stream_weights(block, "txt" if group == "p" else "img")
            out[f"q_{group}"] = apply_rotary(_split_heads(x @ w["wq"], heads), ang)
            out[f"k_{group}"] = apply_rotary(_split_heads(x @ w["wk"], heads), ang)
            out[f"v_{group}"] = _split_heads(x @ w["wv"], heads)
        return out

    def block_projections(self, block, x_t, prompt, t_label):
        """Pre-rotation per-head q/k/v of ``block`` for a latent run in isolation."""
        heads = self.config.num_heads
        h_txt, h_img = self._embed(x_t, prompt, t_label)
        for i in range(block):
            h_txt, h_img, _ = self._block(i, h_txt, h_img, self._angles(len(prompt)))
        n_txt, n_img = layer_norm(h_txt), layer_norm(h_img)
        out = {}
        for group, x in (("p", n_txt), ("img", n_img)):
            w = self.stream_weights(block, "txt" if group == "p" else "img")
            for name in ("q", "k", "v"):
                out[f"{name}_{group}"] = _split_heads(x @ w[f"w{name}"], heads)
        return out

    def attention_sublayer(self, block, n_txt, n_img, angles=None, source_kv=None, weights=None):
        """Joint attention of one block on normalised tokens, before the residual."""
        angles = angles if angles is not None else self._angles(len(n_txt))
        qkv = self._qkv(block, n_txt, n_img, angles)
        state = AttentionState(**qkv, block=block)
        if source_kv is not None:
            state.k_src, state.v_src = source_kv
        attend(state, weights)
        w_txt = self.stream_weights(block, "txt")
        w_img = self.stream_weights(block, "img")
        return _merge_heads(state.out_p) @ w_txt["wo"], _merge_heads(state.out_img) @ w_img["wo"], state

    def attention_sublayer_jvp(self, block, n_txt, n_img, d_txt, d_img):
        """Forward-mode derivative of :meth:`attention_sublayer` (no source)."""
        heads, hd = self.config.num_heads, self.config.head_dim
        angles = self._angles(len(n_txt))
        w_txt, w_img = self.stream_weights(block, "txt"), self.stream_weights(block, "img")

        def proj(x_t, x_i, name, rotate):
            parts = []
            for x, w, ang in ((x_t, w_txt, angles[0]), (x_i, w_img, angles[1])):
                y = _split_heads(x @ w[name], heads)
                parts.append(apply_rotary(y, ang) if rotate else y)
            return np.concatenate(parts, axis=1)

        q, dq = proj(n_txt, n_img, "wq", True), proj(d_txt, d_img, "wq", True)
        k, dk = proj(n_txt, n_img, "wk", True), proj(d_txt, d_img, "wk", True)
        v, dv = proj(n_txt, n_img, "wv", False), proj(d_txt, d_img, "wv", False)
        scale = 1.0 / math.sqrt(hd)
        kt, dkt = np.swapaxes(k, -1, -2), np.swapaxes(dk, -1, -2)
        attn = softmax_rows(q @ kt * scale)
        ds = (dq @ kt + q @ dkt) * scale
        da = attn * (ds - (attn * ds).sum(axis=-1, keepdims=True))
        out, dout = attn @ v, da @ v + attn @ dv
        n = len(n_txt)
        res = []
        for arr in (out, dout):
            m = _merge_heads(arr)
            res.append((m[:n] @ w_txt["wo"], m[n:] @ w_img["wo"]))
        return res[0], res[1]

    def _mlp(self, block, group, x):
        w = self.stream_weights(block, group)
        return gelu(layer_norm(x) @ w["w1"]) @ w["w2"]

    def _block(self, block, h_txt, h_img, angles, source_kv=None, weights=None):
        a_txt, a_img, state = self.attention_sublayer(
            block, layer_norm(h_txt), layer_norm(h_img), angles, source_kv, weights
        )
        h_txt = h_txt + a_txt
        h_img = h_img + a_img
        h_txt = h_txt + self._mlp(block, "txt", h_txt)
        h_img = h_img + self._mlp(block, "img", h_img)
        return h_txt, h_img, state

    def forward(self, x_t, prompt, t_label, *, source_kv=None, extend=None, weights=None,
                hook=None, position_offset=(0, 0)):
        """Velocity prediction plus each block's image keys/values.

        Parameters
        ----------
        source_kv : list of (k, v) per block, optional
            Source-stream image keys/values to extend attention with.
        extend : sequence of bool per block, optional
            Which blocks use ``source_kv``.  Defaults to all when ``source_kv``
            is given.
        weights : AttentionWeights, optional
            Key scales for extended blocks.
        hook : callable(block, AttentionState), optional
            Receives every block's attention state.
        position_offset : (int, int)
            Integer shift of the image tokens' rotary positions.

        Returns
        -------
        velocity : ndarray (height, width, channels)
        kv : list of (k_img, v_img) per block
        """
        cfg = self.config
        h_txt, h_img = self._embed(x_t, prompt, t_label)
        angles = self._angles(len(prompt), position_offset)
        if source_kv is not None and extend is None:
            extend = [True] * cfg.num_blocks
        kv = []
        for i in range(cfg.num_blocks):
            src = source_kv[i] if source_kv is not None and extend[i] else None
            h_txt, h_img, state = self._block(i, h_txt, h_img, angles, src, weights)
            kv.append((state.k_img, state.v_img))
            if hook is not None:
                hook(i, state)
        v = layer_norm(h_img) @ self.weights["out_proj"]
        return check_finite(v, "velocity").reshape(cfg.latent_shape), kv

    def velocity(self, x_t, prompt, t_label, **kwargs):
        return self.forward(x_t, prompt, t_label, **kwargs)[0]

    def sample(self, prompt, seed, schedule, start_latent=None):
        """Plain baseline-attention sampling from seeded noise."""
        from .flow import euler_step, sample_noise

        x = sample_noise(seed, self.config.latent_shape) if start_latent is None else start_latent
        for step in range(schedule.num_steps):
            x = euler_step(x, self.velocity(x, prompt, schedule.label(step)), step, schedule)
        return x
