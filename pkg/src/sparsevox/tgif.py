"""Prompt-conditioned filtering of a 2D feature map.

A prompt is an ordered set of retained class indices. Each class owns a
learned embedding row (there is no pretrained language model); the rows pass
through one self-attention layer, then every pixel cross-attends to the
resulting tokens and the update is added residually before a layer norm.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxcore import ClassTable, InvalidShape, ParameterStore, softmax, softmax_backward

LN_EPS = 1e-5


@dataclass(frozen=True)
class PromptSet:
    retained_classes: tuple[int, ...]
    token_dim: int

    def __post_init__(self):
        rc = tuple(int(k) for k in self.retained_classes)
        if len(set(rc)) != len(rc):
            raise ValueError(f"duplicate classes in prompt {rc}")
        if 0 in rc:
            raise ValueError("class 0 (empty) cannot appear in a prompt")
        object.__setattr__(self, "retained_classes", rc)

    def __len__(self):
        return len(self.retained_classes)

    def render(self, class_table: ClassTable) -> str:
        return ", ".join(class_table.names[k] for k in self.retained_classes)


class TextGuidedFilter:
    """Parameters live in ``store`` under the ``tgif.`` prefix."""

    def __init__(self, store: ParameterStore, n_classes: int, channels: int, token_dim: int | None = None,
                 use_layer_norm: bool = True):
        d = token_dim or channels
        C = channels
        self.n_classes, self.channels, self.token_dim = n_classes, C, d
        self.use_layer_norm = use_layer_norm
        sd = 1.0 / (0.02 * np.sqrt(d))  # unit-variance logits at init
        self.embed = store.add("tgif.embed", (n_classes, d), scale=50.0)
        self.null = store.add("tgif.null", (d,), scale=50.0)
        self.wq_s = store.add("tgif.self.wq", (d, d), scale=sd)
        self.wk_s = store.add("tgif.self.wk", (d, d), scale=sd)
        self.wv_s = store.add("tgif.self.wv", (d, d), scale=sd)
        self.wo_s = store.add("tgif.self.wo", (d, d), scale=sd)
        self.w_in = store.add("tgif.token_proj", (d, C), scale=sd)
        sc = 1.0 / (0.02 * np.sqrt(C))
        self.wq = store.add("tgif.cross.wq", (C, C), scale=sc)
        self.wk = store.add("tgif.cross.wk", (C, C), scale=sc)
        self.wv = store.add("tgif.cross.wv", (C, C), scale=sc)
        self.wo = store.add("tgif.cross.wo", (C, C), kind="zeros")
        self.gamma = store.add("tgif.ln.gamma", (C,), kind="ones")
        self.beta = store.add("tgif.ln.beta", (C,), kind="zeros")

    # -------------------------------------------------------------- tokens

    def encode_prompt(self, prompt: PromptSet):
        if prompt.token_dim != self.token_dim:
            raise InvalidShape(f"prompt token_dim {prompt.token_dim} != {self.token_dim}")
        rows = list(prompt.retained_classes)
        if any(k >= self.n_classes for k in rows):
            raise ValueError(f"prompt class outside table of {self.n_classes}")
        X = self.embed.value[rows] if rows else self.null.value[None, :]
        d = self.token_dim
        Q = X @ self.wq_s.value
        K = X @ self.wk_s.value
        V = X @ self.wv_s.value
        A = softmax(Q @ K.T / np.sqrt(d), axis=1)
        O = A @ V
        T = O @ self.wo_s.value
        return T, dict(rows=rows, X=X, Q=Q, K=K, V=V, A=A, O=O)

    def encode_backward(self, cache, dT):
        X, Q, K, V, A, O = (cache[k] for k in "XQKVAO")
        d = self.token_dim
        self.wo_s.grad += O.T @ dT
        dO = dT @ self.wo_s.value.T
        dA = dO @ V.T
        dV = A.T @ dO
        dS = softmax_backward(A, dA, axis=1) / np.sqrt(d)
        dQ = dS @ K
        dK = dS.T @ Q
        self.wq_s.grad += X.T @ dQ
        self.wk_s.grad += X.T @ dK
        self.wv_s.grad += X.T @ dV
        dX = dQ @ self.wq_s.value.T + dK @ self.wk_s.value.T + dV @ self.wv_s.value.T
        if cache["rows"]:
            np.add.at(self.embed.grad, cache["rows"], dX)
        else:
            self.null.grad += dX[0]
        return dX

    # -------------------------------------------------------------- filter

    def apply(self, f, tokens):
        f = np.asarray(f, dtype=np.float64)
        if f.ndim != 3 or f.shape[2] != self.channels:
            raise InvalidShape(f"feature map must be HxWx{self.channels}, got {f.shape}")
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[1] != self.token_dim:
            raise InvalidShape(f"tokens must be n x {self.token_dim}, got {tokens.shape}")
        H, W, C = f.shape
        P = f.reshape(-1, C)
        Tp = tokens @ self.w_in.value
        q = P @ self.wq.value
        k = Tp @ self.wk.value
        v = Tp @ self.wv.value
        a = softmax(q @ k.T / np.sqrt(C), axis=1)
        av = a @ v
        r = P + av @ self.wo.value
        cache = dict(shape=f.shape, P=P, tokens=tokens, Tp=Tp, q=q, k=k, v=v, a=a, av=av)
        if self.use_layer_norm:
            mu = r.mean(axis=1, keepdims=True)
            xc = r - mu
            inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LN_EPS)
            xhat = xc * inv
            out = xhat * self.gamma.value + self.beta.value
            cache.update(xhat=xhat, inv=inv)
        else:
            out = r
        return out.reshape(H, W, C), cache

    def apply_backward(self, cache, dout):
        H, W, C = cache["shape"]
        d_out = np.asarray(dout, dtype=np.float64).reshape(-1, C)
        if self.use_layer_norm:
            xhat, inv = cache["xhat"], cache["inv"]
            self.gamma.grad += (d_out * xhat).sum(axis=0)
            self.beta.grad += d_out.sum(axis=0)
            dxh = d_out * self.gamma.value
            dr = inv * (dxh - dxh.mean(axis=1, keepdims=True)
                        - xhat * (dxh * xhat).mean(axis=1, keepdims=True))
        else:
            dr = d_out
        P, Tp, q, k, v, a, av = (cache[x] for x in ("P", "Tp", "q", "k", "v", "a", "av"))
        self.wo.grad += av.T @ dr
        dav = dr @ self.wo.value.T
        da = dav @ v.T
        dv = a.T @ dav
        dl = softmax_backward(a, da, axis=1) / np.sqrt(C)
        dq = dl @ k
        dk = dl.T @ q
        self.wq.grad += P.T @ dq
        self.wk.grad += Tp.T @ dk
        self.wv.grad += Tp.T @ dv
        dP = dr + dq @ self.wq.value.T
        dTp = dk @ self.wk.value.T + dv @ self.wv.value.T
        self.w_in.grad += cache["tokens"].T @ dTp
        dtokens = dTp @ self.w_in.value.T
        return dP.reshape(H, W, C), dtokens


def encode_prompt(prompt: PromptSet, table: TextGuidedFilter) -> np.ndarray:
    return table.encode_prompt(prompt)[0]


def tgif_apply(f, tokens, table: TextGuidedFilter) -> np.ndarray:
    return table.apply(f, tokens)[0]
