"""Transform-matrix analysis: singular value decomposition and fingerprints."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

EPS = np.finfo(np.float64).eps


@dataclass
class SvdResult:
    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.singular_values[..., None, :]) @ np.swapaxes(self.V, -1, -2)


def _tournament(m: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Round-robin schedule for an even number ``m`` of columns.

    Returns the initial arrangement and, per round, the gather index that
    moves the current arrangement to the next one.  In every arrangement the
    pairs to rotate sit at positions (2k, 2k + 1).  After ``m - 1`` rounds the
    arrangement is back at its start.
    """
    players = list(range(m))
    arrangements = []
    for _ in range(m - 1):
        order = []
        for i in range(m // 2):
            order += [players[i], players[m - 1 - i]]
        arrangements.append(np.array(order))
        players = [players[0], players[-1]] + players[1:-1]
    moves = []
    for r in range(m - 1):
        cur, nxt = arrangements[r], arrangements[(r + 1) % (m - 1)]
        where = np.empty(m, dtype=int)
        where[cur] = np.arange(m)
        moves.append(where[nxt])
    return arrangements[0], moves


def _complete_basis(U: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns of U flagged ``~good`` with an orthonormal completion."""
    n = U.shape[0]
    U = U.copy()
    basis = [U[:, k] for k in range(U.shape[1]) if good[k]]
    candidates = iter(np.eye(n))
    for k in range(U.shape[1]):
        if good[k]:
            continue
        for e in candidates:
            v = e.copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                U[:, k] = v
                basis.append(v)
                break
    return U


def svd_decompose(M: np.ndarray, tol: float | None = None, max_sweeps: int = 60,
                  chunk: int = 16) -> SvdResult:
    """Cyclic one-sided (Hestenes) Jacobi SVD of a square matrix or a stack of them.

    Columns of ``M V`` are rotated pairwise until mutually orthogonal; their
    norms are the singular values.  Rotations for disjoint pairs are applied
    together, one tournament round at a time.

    Sign convention: the largest-magnitude entry of every U column is >= 0.
    """
    A = np.array(M, dtype=np.float64, copy=True)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"svd_decompose expects square matrices, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("svd_decompose: non-finite input")
    single = A.ndim == 2
    if single:
        A = A[None]
    if len(A) > chunk:
        parts = [svd_decompose(A[i:i + chunk], tol, max_sweeps, chunk) for i in range(0, len(A), chunk)]
        return SvdResult(np.concatenate([r.U for r in parts]),
                         np.concatenate([r.singular_values for r in parts]),
                         np.concatenate([r.V for r in parts]))
    batch, n, _ = A.shape
    if tol is None:
        tol = n * EPS
    m = n + (n % 2)
    # row k of Z holds column k of A followed by column k of V; padded to an even count
    Z = np.zeros((batch, m, 2 * n))
    first, moves = _tournament(m)
    Z[:, :n, :n] = np.swapaxes(A, 1, 2)
    Z[:, :n, n:] = np.eye(n)
    Z = Z[:, first]
    live = np.arange(batch)
    check = max(tol, 4 * n * EPS)

    for _ in range(max_sweeps):
        Zl = Z[live]
        b = len(live)
        # scratch buffers for the rotation products, reused across rounds
        tp = np.empty((b, m // 2, 2 * n))
        tq = np.empty_like(tp)
        norms = np.einsum("bkr,bkr->bk", Zl[:, :, :n], Zl[:, :, :n])
        for move in moves:
            Z4 = Zl.reshape(b, m // 2, 2, 2 * n)
            N2 = norms.reshape(b, m // 2, 2)
            zp, zq = Z4[:, :, 0, :], Z4[:, :, 1, :]
            alpha, beta = N2[:, :, 0], N2[:, :, 1]
            gamma = np.einsum("bkr,bkr->bk", zp[:, :, :n], zq[:, :, :n])
            rotate = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if rotate.any():
                zeta = (beta - alpha) / np.where(rotate, 2.0 * gamma, 1.0)
                t = np.copysign(1.0 / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta)), zeta)
                t *= rotate
                # the rotation annihilates gamma, so the pair norms shift by t * gamma
                tg = t * gamma
                alpha -= tg
                beta += tg
                np.maximum(alpha, 0.0, out=alpha)  # null columns can drift a hair below zero
                np.maximum(beta, 0.0, out=beta)
                c = (1.0 / np.sqrt(1.0 + t * t))[:, :, None]
                s = c * t[:, :, None]
                np.multiply(zq, s, out=tq)
                np.multiply(zp, s, out=tp)
                zp *= c
                zp -= tq
                zq *= c
                zq += tp
            Zl, norms = Zl[:, move], norms[:, move]
        Z[live] = Zl
        # convergence: largest normalised off-diagonal of the column Gram matrix
        X = Zl[:, :, :n]
        G = X @ np.swapaxes(X, 1, 2)
        d = np.sqrt(np.einsum("bii->bi", G))
        with np.errstate(divide="ignore", invalid="ignore"):
            R = np.abs(G) / (d[:, :, None] * d[:, None, :])
        R = np.nan_to_num(R, nan=0.0, posinf=0.0)
        R[:, np.arange(m), np.arange(m)] = 0.0
        live = live[R.max(axis=(1, 2)) > check]
        if len(live) == 0:
            break

    Z = Z[:, np.argsort(first)][:, :n]
    A = np.swapaxes(Z[:, :, :n], 1, 2)
    V = np.swapaxes(Z[:, :, n:], 1, 2)

    sv = np.linalg.norm(A, axis=1)
    order = np.argsort(-sv, axis=1, kind="stable")
    sv = np.take_along_axis(sv, order, axis=1)
    A = np.take_along_axis(A, order[:, None, :], axis=2)
    V = np.take_along_axis(V, order[:, None, :], axis=2)

    U = np.empty_like(A)
    for b in range(batch):
        floor = n * EPS * max(sv[b, 0], np.finfo(np.float64).tiny)
        good = sv[b] > floor
        U[b] = A[b] / np.where(good, sv[b], 1.0)
        if not good.all():
            U[b] = _complete_basis(U[b], good)

    idx = np.argmax(np.abs(U), axis=1)
    lead = np.take_along_axis(U, idx[:, None, :], axis=1)[:, 0, :]
    flip = np.where(lead < 0, -1.0, 1.0)[:, None, :]
    U *= flip
    V *= flip
    if single:
        return SvdResult(U[0], sv[0], V[0])
    return SvdResult(U, sv, V)


# ---------------------------------------------------------------- fingerprints

def smooth(mat: np.ndarray, size: int = 7) -> np.ndarray:
    """Uniform size x size box filter with edge-clamped borders."""
    return uniform_filter(np.asarray(mat, dtype=np.float64), size=size, mode="nearest")


def reference_mean(stacks: Sequence[Sequence[np.ndarray]]) -> list[np.ndarray]:
    """Per-step mean transform over a reference sample of commands."""
    if not stacks:
        raise ValueError("reference sample must contain at least one command")
    J = len(stacks[0])
    return [np.mean([s[j] for s in stacks], axis=0) for j in range(J)]


def transform_fingerprint(stack: Sequence[np.ndarray], mean: Sequence[np.ndarray],
                          size: int = 7) -> list[np.ndarray]:
    if len(stack) != len(mean):
        raise ValueError(f"stack has {len(stack)} transforms, reference mean has {len(mean)}")
    out = []
    for Tj, Mj in zip(stack, mean):
        if Tj.shape != Mj.shape:
            raise ValueError(f"transform shape {Tj.shape} != reference shape {Mj.shape}")
        out.append(smooth(Tj - Mj, size))
    return out


def write_csv(path: str | Path, mat: np.ndarray) -> None:
    np.savetxt(path, mat, delimiter=",", fmt="%.17g")


def to_gray(mat: np.ndarray) -> np.ndarray:
    """Map a signed matrix to 8-bit gray, zero at mid-gray."""
    m = float(np.max(np.abs(mat)))
    if m == 0.0:
        return np.full(mat.shape, 128, dtype=np.uint8)
    return np.clip(np.round(127.5 + 127.5 * mat / m), 0, 255).astype(np.uint8)


def write_gray_ppm(path: str | Path, mat: np.ndarray) -> None:
    g = to_gray(mat)
    rgb = np.repeat(g[:, :, None], 3, axis=2)
    write_ppm(path, rgb)


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(fields[1]), int(fields[2])
    body = data[pos + 1:pos + 1 + w * h * 3]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def analyze_transforms(transforms_of, pairs: Sequence[tuple], references: Sequence, out_dir: str | Path,
                       size: int = 7) -> list[tuple[list[np.ndarray], list[np.ndarray]]]:
    """Fingerprint both commands of every pair against a reference sample.

    ``transforms_of(tokens)`` returns the list of T_j matrices for one
    command.  Writes ``pair{i}_{a,b}_T{j}.csv`` and ``.ppm`` into ``out_dir``.
    """
    mean = reference_mean([transforms_of(r) for r in references])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for i, (a, b) in enumerate(pairs):
        fa = transform_fingerprint(transforms_of(a), mean, size)
        fb = transform_fingerprint(transforms_of(b), mean, size)
        for tag, fps in (("a", fa), ("b", fb)):
            for j, fp in enumerate(fps, 1):
                write_csv(out / f"pair{i}_{tag}_T{j}.csv", fp)
                write_gray_ppm(out / f"pair{i}_{tag}_T{j}.ppm", fp)
        results.append((fa, fb))
    return results
