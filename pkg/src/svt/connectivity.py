"""Static reachability analysis for masked block-local attention schedules.

The analyzer answers, without running the network: which input pixels can
influence the decoder state at each position, where are the blind spots
(ordered pairs the masking makes structurally independent), and does an
unmasked encoder schedule connect every pair of positions?

Semantics match gradient sensitivity exactly.  A pixel enters the stack only
through the masked convolution in front of it (strictly-preceding window
positions; the center is excluded), so the input-influence relation is the
composition of those window edges with the attention reachability, where a
causal layer lets information flow from j to p iff both share a block and
j's raster index is <= p's.  Residual connections make every layer keep what
a position already reached.
"""

from dataclasses import dataclass

import numpy as np

from .attention import BlockShape
from .tensor import masked_taps


def _positions(slice_shape):
    T, H, W = slice_shape
    t, h, w = np.meshgrid(np.arange(T), np.arange(H), np.arange(W), indexing="ij")
    return np.stack([t.ravel(), h.ravel(), w.ravel()], axis=1)  # raster order


def _block_index_groups(slice_shape, bs):
    """(num_blocks, n_p) position ids, raster-ordered within each block."""
    T, H, W = slice_shape
    bs.check_divides(slice_shape)
    coords = _positions(slice_shape)
    block_id = ((coords[:, 0] // bs.t) * (H // bs.h) + coords[:, 1] // bs.h) \
        * (W // bs.w) + coords[:, 2] // bs.w
    order = np.lexsort((np.arange(len(coords)), block_id))  # stable: raster within block
    return order.reshape(-1, bs.n_positions)


def conv_window_edges(slice_shape, kernel):
    """(P, P) bool: [p, q] True iff q is a strictly-preceding window tap of p."""
    T, H, W = slice_shape
    P = T * H * W
    edges = np.zeros((P, P), dtype=bool)
    coords = _positions(slice_shape)
    center = (kernel[0] // 2, kernel[1] // 2, kernel[2] // 2)
    for tap in masked_taps(kernel):
        off = np.asarray(tap) - np.asarray(center)
        q = coords + off
        ok = ((q >= 0) & (q < np.asarray([T, H, W]))).all(axis=1)
        qid = (q[:, 0] * H + q[:, 1]) * W + q[:, 2]
        edges[np.arange(P)[ok], qid[ok]] = True
    return edges


def _apply_attention(reach, groups, causal):
    """One attention layer over per-position reach sets, in place."""
    flat = groups.reshape(-1)
    rows = reach[flat].reshape(groups.shape[0], groups.shape[1], -1)
    if causal:
        np.logical_or.accumulate(rows, axis=1, out=rows)
    else:
        rows |= rows.any(axis=1, keepdims=True)
    reach[flat] = rows.reshape(len(flat), -1)


@dataclass
class DependencyReport:
    slice_shape: tuple
    schedule: list            # list of BlockShape
    kernel: tuple
    reach: np.ndarray         # (P, P) bool, [p, q]: input q influences position p

    @property
    def n_positions(self):
        return int(np.prod(self.slice_shape))

    def raster_coords(self, pid):
        T, H, W = self.slice_shape
        return (pid // (H * W), (pid // W) % H, pid % W)

    def blind_count(self):
        """Number of ordered pairs (p, q), q before p, with no influence path."""
        P = self.n_positions
        lower = np.tril(np.ones((P, P), dtype=bool), k=-1)
        return int((lower & ~self.reach).sum())

    def ordered_pair_count(self):
        P = self.n_positions
        return P * (P - 1) // 2


def dependency_graph(slice_shape, schedule, kernel=(3, 3, 3)):
    """Layered input-influence reachability for a masked decoder stack.

    ``schedule``: iterable of BlockShape (or anything with a ``block``
    attribute).  Layer 0 is the masked convolution window; every attention
    layer then merges reach sets forward in raster order within its blocks.
    """
    blocks = [b.block if hasattr(b, "block") else b for b in schedule]
    reach = conv_window_edges(tuple(slice_shape), tuple(kernel))
    for bs in blocks:
        groups = _block_index_groups(tuple(slice_shape), bs)
        _apply_attention(reach, groups, causal=True)
    report = DependencyReport(tuple(slice_shape), blocks, tuple(kernel), reach)
    # masking can never create forward influence
    P = report.n_positions
    assert not (np.triu(np.ones((P, P), dtype=bool)) & reach).any()
    return report


def find_blind_spots(report, max_report=32):
    """Blind pairs (p, q) as coordinate tuples, nearest raster distance first."""
    P = report.n_positions
    out = []
    for d in range(1, P):
        ps = np.arange(d, P)
        blind = ~report.reach[ps, ps - d]
        for p in ps[blind]:
            out.append((report.raster_coords(int(p)), report.raster_coords(int(p - d))))
            if len(out) >= max_report:
                return out
    return out


def verify_encoder_connectivity(slice_shape, schedule):
    """Does the unmasked layer graph connect every ordered position pair?

    Returns (True, None) or (False, (p, q)) with an unconnected witness pair
    in raster coordinates.
    """
    blocks = [b.block if hasattr(b, "block") else b for b in schedule]
    P = int(np.prod(slice_shape))
    reach = np.eye(P, dtype=bool)
    for bs in blocks:
        groups = _block_index_groups(tuple(slice_shape), bs)
        _apply_attention(reach, groups, causal=False)
    if reach.all():
        return True, None
    p, q = np.argwhere(~reach)[0]
    T, H, W = slice_shape
    coord = lambda i: (int(i) // (H * W), (int(i) // W) % H, int(i) % W)
    return False, (coord(p), coord(q))


def report_text(slice_shape, dec_schedule, kernel, enc_schedule=None,
                max_pairs=16, stack="both"):
    """Human-readable analysis: schedule echo, verdicts, blind spots."""
    fmt_blocks = lambda sched: " ".join(
        str((b.block if hasattr(b, "block") else b).as_tuple()) for b in sched)
    lines = [f"slice shape: {tuple(slice_shape)}"]
    if stack in ("both", "decoder"):
        report = dependency_graph(slice_shape, dec_schedule, kernel)
        blind = report.blind_count()
        lines.append(f"decoder schedule: {fmt_blocks(dec_schedule)}")
        lines.append(f"masked conv kernel: {tuple(kernel)}")
        lines.append(f"blind pairs: {blind} of {report.ordered_pair_count()} ordered pairs")
        for p, q in find_blind_spots(report, max_pairs):
            lines.append(f"  blind: p={p} cannot see q={q}")
    if stack in ("both", "encoder") and enc_schedule is not None:
        ok, witness = verify_encoder_connectivity(slice_shape, enc_schedule)
        lines.append(f"encoder schedule: {fmt_blocks(enc_schedule)}")
        if ok:
            lines.append("encoder connectivity: connected")
        else:
            lines.append(f"encoder connectivity: DISCONNECTED witness p={witness[0]} q={witness[1]}")
    return "\n".join(lines) + "\n"
