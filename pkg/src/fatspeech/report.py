"""File renderers: attention maps (CSV, PGM, PNG), loss curves, timing plots.

Attention matrices are dumped three ways: full-precision delimited text for
downstream tooling, dependency-free binary PGM images, and matplotlib PNG
figures. Every delimited file keeps the row-stochastic property: full
matrices are softmax rows as computed, segment blocks are renormalized over
the columns they keep.
"""

import csv
import math
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError, FormatError


def save_pgm(path, matrix):
    """8-bit binary PGM; each row is scaled so its own maximum hits 255."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise DataError(f"save_pgm: need a non-empty 2-D matrix, got {m.shape}")
    row_max = m.max(axis=1, keepdims=True)
    scaled = np.where(row_max > 0, m / np.where(row_max > 0, row_max, 1.0), 0.0)
    img = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(img.tobytes())


def load_pgm(path):
    """Read back a binary PGM written by save_pgm. Returns uint8 (h, w)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM")
    fields = []
    pos = 2
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
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    body = raw[pos:pos + w * h]
    if len(body) != w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def save_matrix_csv(path, matrix, comment=None):
    """Full-precision delimited dump, optionally led by one # comment line."""
    m = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="") as f:
        if comment:
            f.write(f"# {comment}\n")
        writer = csv.writer(f)
        for row in m:
            writer.writerow([f"{v:.10e}" for v in row])


def load_matrix_csv(path):
    with open(path, encoding="utf-8", newline="") as f:
        rows = [r for r in csv.reader(line for line in f
                                      if not line.startswith("#"))]
    return np.array([[float(v) for v in row] for row in rows])


def diagonal_concentration(matrix, band_frac=0.1):
    """Share of each row's mass inside a band around the aligned diagonal.

    Query i is aligned to key i * (K-1) / (Q-1) (midpoint for a single
    query); the band half-width is band_frac of the key count, at least one
    key. Uniform attention scores roughly the band's share of the key axis,
    hard alignment scores 1.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise DataError("diagonal_concentration: need a non-empty 2-D matrix")
    q_len, k_len = m.shape
    half = max(1, int(round(band_frac * k_len)))
    shares = []
    for i in range(q_len):
        total = m[i].sum()
        if total <= 0:
            continue
        center = (k_len - 1) / 2.0 if q_len == 1 else i * (k_len - 1) / (q_len - 1)
        lo = max(0, int(math.floor(center - half)))
        hi = min(k_len, int(math.ceil(center + half)) + 1)
        shares.append(m[i, lo:hi].sum() / total)
    if not shares:
        raise DataError("diagonal_concentration: all rows are zero")
    return float(np.mean(shares))


def _segment_slices(segments):
    out = {}
    offset = 0
    for name, length in segments:
        out[name] = slice(offset, offset + length)
        offset += length
    return out


def render_head_grid_png(path, matrices, suptitle):
    """One PNG per layer: its heads side by side, shared color scale."""
    n = len(matrices)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), squeeze=False)
    vmax = max(float(np.max(m)) for m in matrices) or 1.0
    for j, (ax, m) in enumerate(zip(axes[0], matrices)):
        ax.imshow(np.asarray(m), aspect="auto", origin="upper",
                  cmap="viridis", vmin=0.0, vmax=vmax,
                  interpolation="nearest")
        ax.set_title(f"head {j}", fontsize=9)
        ax.set_xlabel("key")
        if j == 0:
            ax.set_ylabel("query")
    fig.suptitle(suptitle, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def dump_attention_stage(out_dir, uid, stage, layer_maps, segments=None,
                         band_frac=0.1):
    """Write one stage's attention maps and return metric rows.

    layer_maps is a list over layers of per-head (Q, K) arrays. For fused
    inputs with several segments, per-segment-pair block files are written
    next to the full matrices, renormalized over the kept columns. Returned
    rows are (uid, stage, layer, head, block, rows, cols, concentration).
    """
    out_dir = Path(out_dir)
    rows = []
    seg_slices = _segment_slices(segments) if segments else None
    multi = seg_slices is not None and len(seg_slices) > 1
    for li, heads in enumerate(layer_maps):
        for hi, m in enumerate(heads):
            m = np.asarray(m, dtype=np.float64)
            if segments and not multi:
                only = next(iter(seg_slices))
                block_tag = f"{only}-{only}"
            else:
                block_tag = "all-all"
            stem = f"{uid}.{stage}.l{li}.h{hi}.{block_tag}"
            comment = (f"uid={uid} stage={stage} layer={li} head={hi} "
                       f"block={block_tag} rows sum to 1")
            save_matrix_csv(out_dir / f"{stem}.csv", m, comment=comment)
            save_pgm(out_dir / f"{stem}.pgm", m)
            rows.append((uid, stage, li, hi, block_tag, m.shape[0],
                         m.shape[1], diagonal_concentration(m, band_frac)))
            if multi and stage != "cross":
                for q_name, q_slice in seg_slices.items():
                    for k_name, k_slice in seg_slices.items():
                        block = m[q_slice, k_slice]
                        if block.size == 0:
                            continue
                        sums = block.sum(axis=1, keepdims=True)
                        renorm = np.where(sums > 0, block /
                                          np.where(sums > 0, sums, 1.0), 0.0)
                        tag = f"{q_name}-{k_name}"
                        bpath = out_dir / f"{uid}.{stage}.l{li}.h{hi}.{tag}.csv"
                        save_matrix_csv(
                            bpath, renorm,
                            comment=(f"uid={uid} stage={stage} layer={li} "
                                     f"head={hi} block={tag} rows "
                                     f"renormalized over kept columns"))
        grid_path = out_dir / f"{uid}.{stage}.l{li}.png"
        render_head_grid_png(grid_path,
                             [np.asarray(h, dtype=np.float64) for h in heads],
                             f"{uid} {stage} layer {li}")
    return rows


def write_attention_summary(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["uid", "stage", "layer", "head", "block",
                         "rows", "cols", "diagonal_concentration"])
        for r in rows:
            writer.writerow(list(r[:7]) + [f"{r[7]:.6f}"])


def render_loss_curve(path, log_csv_path):
    """Total loss vs step from a training log, one line per stream."""
    by_stream = {}
    dev_points = []
    with open(log_csv_path, encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            step = int(row["step"])
            by_stream.setdefault(row["stream"], []).append(
                (step, float(row["total"])))
            if row.get("dev_total"):
                dev_points.append((step, float(row["dev_total"])))
    if not by_stream:
        raise DataError(f"render_loss_curve: {log_csv_path} has no rows")
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in sorted(by_stream):
        pts = by_stream[name]
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                label=f"train/{name}", linewidth=1.2)
    if dev_points:
        ax.plot([p[0] for p in dev_points], [p[1] for p in dev_points],
                "o--", label="dev", markersize=4)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_timing_csv(path, rows):
    """rows: (uid, source_units, seconds, tokens)."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["uid", "source_units", "seconds", "tokens"])
        for uid, units, seconds, tokens in rows:
            writer.writerow([uid, units, f"{seconds:.6f}", tokens])


def render_timing_figure(path, rows):
    """Decode wall time against source length."""
    if not rows:
        raise DataError("render_timing_figure: no timing rows")
    units = [r[1] for r in rows]
    secs = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(units, secs, s=18)
    ax.set_xlabel("source units")
    ax.set_ylabel("decode seconds")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
