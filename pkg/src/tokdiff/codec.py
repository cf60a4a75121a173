"""Toy vector-quantized image codec.

Images are float arrays of shape (H, W, C) with values in [0, 1] and C in
{1, 3}.  A codebook of K centroids over non-overlapping patch_edge x
patch_edge patches is fitted with plain k-means; encoding maps each patch
to its nearest centroid (squared distance, ties to the lowest index) and
decoding tiles the centroid patches back.  Token grids carry K ordinary
indices 0..K-1; index K is reserved for the diffusion MASK state and is
never a valid codec input or output.

File formats: binary PPM (P6) for 3-channel and PGM (P5) for 1-channel
images at 8 bits; token grids as a text header "h w K" followed by h*w
integers; codebooks as a text header "K d patch_edge channels" followed by
K rows of d floats at full precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TokenGrid:
    """An h x w grid of categorical token indices over K ordinary states."""

    tokens: np.ndarray  # (h, w) integer array
    K: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise ValueError("tokens must be 2-D")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if np.any(self.tokens < 0) or np.any(self.tokens > self.K):
            raise ValueError(f"tokens must lie in [0, {self.K}]")

    @property
    def h(self) -> int:
        return self.tokens.shape[0]

    @property
    def w(self) -> int:
        return self.tokens.shape[1]

    @property
    def n(self) -> int:
        return self.tokens.size

    @property
    def mask_index(self) -> int:
        return self.K

    def has_mask(self) -> bool:
        return bool(np.any(self.tokens == self.K))

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.tokens.copy(), self.K)


@dataclass(frozen=True)
class ToyCodebook:
    """K centroids of dimension d = patch_edge**2 * channels, values in [0, 1]."""

    entries: np.ndarray  # (K, d) float64
    patch_edge: int
    channels: int

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        object.__setattr__(self, "entries", e)
        if e.ndim != 2 or e.shape[0] < 1:
            raise ValueError("entries must be a (K, d) array with K >= 1")
        if e.shape[1] != self.patch_edge ** 2 * self.channels:
            raise ValueError("entry dimension must equal patch_edge**2 * channels")
        if not np.all(np.isfinite(e)) or e.min() < 0.0 or e.max() > 1.0:
            raise ValueError("entries must be finite and within [0, 1]")
        e.setflags(write=False)

    @property
    def K(self) -> int:
        return self.entries.shape[0]


def _check_image(img: np.ndarray, patch_edge: int = 1) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError("image must have shape (H, W, C) with C in {1, 3}")
    if img.shape[0] % patch_edge or img.shape[1] % patch_edge:
        raise ValueError(
            f"image dimensions {img.shape[:2]} not divisible by patch_edge={patch_edge}")
    return img


def _extract_patches(img: np.ndarray, patch_edge: int) -> np.ndarray:
    """Flatten non-overlapping patches to rows of a (h*w, d) matrix, row-major."""
    H, W, C = img.shape
    h, w = H // patch_edge, W // patch_edge
    p = img.reshape(h, patch_edge, w, patch_edge, C)
    return p.transpose(0, 2, 1, 3, 4).reshape(h * w, patch_edge * patch_edge * C)


def fit_codebook(images, K: int, iters: int = 20, seed: int = 0,
                 patch_edge: int = 1) -> ToyCodebook:
    """Fit K centroids by k-means over all patches of the given images.

    Deterministic given the seed: init picks K distinct patches, assignment
    ties break toward the lowest centroid index, and clusters that empty out
    are re-seeded from the patch currently farthest from its centroid.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not images:
        raise ValueError("insufficient data: no images")
    channels = np.asarray(images[0]).shape[2]
    patches = np.concatenate(
        [_extract_patches(_check_image(im, patch_edge), patch_edge) for im in images])
    distinct = np.unique(patches, axis=0)
    if distinct.shape[0] < K:
        raise ValueError(
            f"insufficient data: {distinct.shape[0]} distinct patches < K={K}")

    rng = np.random.default_rng(seed)
    centroids = distinct[rng.choice(distinct.shape[0], size=K, replace=False)].copy()
    assign = None
    for _ in range(iters):
        d2 = _sq_distances(patches, centroids)
        new_assign = np.argmin(d2, axis=1)  # argmin ties -> lowest index
        nearest = d2[np.arange(patches.shape[0]), new_assign]
        for k in range(K):
            sel = new_assign == k
            if np.any(sel):
                centroids[k] = patches[sel].mean(axis=0)
            else:
                far = int(np.argmax(nearest))
                centroids[k] = patches[far]
                new_assign[far] = k
                nearest[far] = -1.0
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
    return ToyCodebook(entries=np.clip(centroids, 0.0, 1.0),
                       patch_edge=patch_edge, channels=channels)


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def encode(img, cb: ToyCodebook) -> TokenGrid:
    """Map each patch to its nearest codebook entry; ties to the lowest index."""
    img = _check_image(img, cb.patch_edge)
    if img.shape[2] != cb.channels:
        raise ValueError(f"image has {img.shape[2]} channels, codebook {cb.channels}")
    patches = _extract_patches(img, cb.patch_edge)
    idx = np.argmin(_sq_distances(patches, cb.entries), axis=1)
    h = img.shape[0] // cb.patch_edge
    w = img.shape[1] // cb.patch_edge
    return TokenGrid(idx.reshape(h, w), cb.K)


def decode(g: TokenGrid, cb: ToyCodebook) -> np.ndarray:
    """Replace each token by its centroid patch; MASK tokens are an error."""
    if g.K != cb.K:
        raise ValueError(f"grid K={g.K} does not match codebook K={cb.K}")
    if g.has_mask():
        raise ValueError("cannot decode MASK")
    e = cb.patch_edge
    patches = cb.entries[g.tokens.ravel()].reshape(g.h, g.w, e, e, cb.channels)
    return patches.transpose(0, 2, 1, 3, 4).reshape(g.h * e, g.w * e, cb.channels)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def write_image(img, path) -> None:
    """Write a [0,1] float image as binary PPM (3 channels) or PGM (1 channel)."""
    img = _check_image(img)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    magic = b"P6" if img.shape[2] == 3 else b"P5"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(data.tobytes())


def read_image(path) -> np.ndarray:
    """Read a binary PPM/PGM file into a [0,1] float image of shape (H, W, C)."""
    with open(path, "rb") as f:
        raw = f.read()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported image magic {magic!r} (want P5 or P6)")
    channels = 3 if magic == b"P6" else 1
    # header: magic, width, height, maxval; '#' comments allowed between fields
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("only 8-bit images are supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * channels, offset=pos)
    return data.reshape(h, w, channels).astype(np.float64) / 255.0


def write_token_grid(g: TokenGrid, path) -> None:
    """Serialize as 'h w K' header plus h*w whitespace-separated integers."""
    with open(path, "w") as f:
        f.write(f"{g.h} {g.w} {g.K}\n")
        for row in g.tokens:
            f.write(" ".join(str(int(v)) for v in row) + "\n")


def read_token_grid(path) -> TokenGrid:
    with open(path) as f:
        h, w, K = (int(v) for v in f.readline().split())
        vals = [int(v) for v in f.read().split()]
    if len(vals) != h * w:
        raise ValueError(f"expected {h * w} tokens, found {len(vals)}")
    return TokenGrid(np.array(vals).reshape(h, w), K)


def write_codebook(cb: ToyCodebook, path) -> None:
    with open(path, "w") as f:
        f.write(f"{cb.K} {cb.entries.shape[1]} {cb.patch_edge} {cb.channels}\n")
        for row in cb.entries:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_codebook(path) -> ToyCodebook:
    with open(path) as f:
        K, d, patch_edge, channels = (int(v) for v in f.readline().split())
        entries = np.array([[float(v) for v in f.readline().split()] for _ in range(K)])
    if entries.shape != (K, d):
        raise ValueError("truncated codebook file")
    return ToyCodebook(entries=entries, patch_edge=patch_edge, channels=channels)
