"""Image I/O, deterministic preprocessing, and Canny edge extraction.

Images are H x W x 3 float arrays in [0, 1]. Edge maps are H x W float
arrays in [0, 1] (binary at extraction time, continuous when estimated).
Foreground masks are H x W uint8 arrays in {0, 1}.
"""

import numpy as np
from PIL import Image, ImageOps
from scipy import ndimage

from .errors import FormatError, ShapeError

# ITU-R BT.601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114])


def load_image(path, target_size):
    """Load an 8-bit RGB image, center-crop to the target aspect ratio,
    bilinear-resize to ``target_size`` and scale intensities to [0, 1].

    Parameters
    ----------
    path : str or Path
      PNG or binary PPM (P6) file.
    target_size : (int, int)
      Output (height, width).

    Returns
    -------
    ndarray, float32, shape (H, W, 3)
    """
    with Image.open(path) as im:
        im.load()
        if im.mode != "RGB":
            raise FormatError(f"{path}: expected 8-bit RGB, got mode {im.mode!r}")
        h, w = target_size
        # PIL sizes are (width, height). fit() crops the largest centered
        # region matching the target aspect ratio, then resizes.
        fitted = ImageOps.fit(im, (w, h), method=Image.Resampling.BILINEAR)
    return np.asarray(fitted, dtype=np.float32) / 255.0


def save_image(img, path):
    """Write an image in [0, 1] as 8-bit PNG or PPM, chosen by suffix."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected H x W x 3 image, got shape {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, "RGB").save(path)


def load_mask(path, size):
    """Load a grayscale mask file and binarize at 0.5.

    The file must decode to grayscale with dimensions exactly ``size``
    (height, width). Returns a uint8 array in {0, 1}.
    """
    with Image.open(path) as im:
        im.load()
        if im.mode not in ("L", "1"):
            raise FormatError(f"{path}: expected grayscale mask, got mode {im.mode!r}")
        if im.mode == "1":
            im = im.convert("L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.shape != tuple(size):
        raise ShapeError(f"mask shape {arr.shape} does not match expected {tuple(size)}")
    return (arr >= 0.5).astype(np.uint8)


def save_mask(mask, path):
    """Write a binary mask as an 8-bit grayscale PNG."""
    data = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(data, "L").save(path)


def rgb_to_gray(img):
    """BT.601 luma of an RGB image in [0, 1]."""
    return np.asarray(img, dtype=np.float64) @ _LUMA


def _gaussian_kernel(sigma):
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(gray, sigma):
    """Separable Gaussian blur with symmetric (edge-repeating) padding."""
    k = _gaussian_kernel(sigma)
    r = len(k) // 2
    out = np.asarray(gray, dtype=np.float64)
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="symmetric")
        acc = np.zeros_like(out)
        for i, w in enumerate(k):
            if axis == 0:
                acc += w * padded[i : i + out.shape[0], :]
            else:
                acc += w * padded[:, i : i + out.shape[1]]
        out = acc
    return out


def _sobel(gray):
    p = np.pad(gray, 1, mode="symmetric")
    h, w = gray.shape
    win = {
        (dy, dx): p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
    }
    gx = (
        (win[(-1, 1)] + 2 * win[(0, 1)] + win[(1, 1)])
        - (win[(-1, -1)] + 2 * win[(0, -1)] + win[(1, -1)])
    )
    gy = (
        (win[(1, -1)] + 2 * win[(1, 0)] + win[(1, 1)])
        - (win[(-1, -1)] + 2 * win[(-1, 0)] + win[(-1, 1)])
    )
    return gx, gy


def canny_edges(img, sigma=1.4, low=0.1, high=0.2):
    """Canny edge detection with thresholds relative to the peak gradient.

    Pipeline: BT.601 grayscale, Gaussian blur (std ``sigma``), Sobel
    gradients, non-maximum suppression along the quantized gradient
    direction, then double-threshold hysteresis with ``low`` and ``high``
    given as fractions of the maximum suppressed gradient magnitude.

    Returns a float32 edge map containing only {0, 1}. A constant image
    yields an all-zero map.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not (0 < low < high <= 1):
        raise ValueError(f"need 0 < low < high <= 1, got low={low}, high={high}")
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected H x W x 3 image, got shape {img.shape}")

    blurred = gaussian_blur(rgb_to_gray(img), sigma)
    gx, gy = _sobel(blurred)
    mag = np.hypot(gx, gy)
    if mag.max() <= 0:
        return np.zeros(img.shape[:2], dtype=np.float32)

    # Non-maximum suppression: compare each pixel against its two
    # neighbours along the quantized gradient direction. Ties keep the
    # forward neighbour side only, so a symmetric ridge stays 1 px wide.
    theta = np.arctan2(gy, gx)
    dy = np.rint(np.sin(theta)).astype(np.intp)
    dx = np.rint(np.cos(theta)).astype(np.intp)
    h, w = mag.shape
    padded = np.pad(mag, 1, mode="constant")
    yy, xx = np.mgrid[0:h, 0:w]
    fwd = padded[1 + yy + dy, 1 + xx + dx]
    bwd = padded[1 + yy - dy, 1 + xx - dx]
    nms = np.where((mag > 0) & (mag >= fwd) & (mag > bwd), mag, 0.0)
    nms[0, :] = nms[-1, :] = 0.0
    nms[:, 0] = nms[:, -1] = 0.0

    peak = nms.max()
    if peak <= 0:
        return np.zeros((h, w), dtype=np.float32)
    weak = nms >= low * peak
    strong = nms >= high * peak
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros((h, w), dtype=np.float32)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels].astype(np.float32)
