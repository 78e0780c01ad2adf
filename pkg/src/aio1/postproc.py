"""Decoders that turn per-frame activations into discrete events.

Beats and downbeats come from exact Viterbi decoding over a bar-pointer
state space: a hidden state is (bar position, phase within the beat,
tempo in whole frames per beat). Within a beat the pointer advances one
frame at a time; when the phase wraps, the bar position steps and the
tempo may change, paying a log penalty proportional to the relative
tempo jump. States in the leading fraction of a beat period emit the
beat (or, on bar position one, the downbeat) activation; every other
state emits the leftover probability mass. One candidate bar length is
decoded per track and the best final log-likelihood wins.

Section boundaries are picked from the boundary activation after
subtracting a centred sliding-window mean: a frame is emitted when the
normalised value is positive and is the strict maximum of its
neighborhood (earliest frame wins ties). Sections between boundaries
get the label with the highest mean per-frame probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

# relative tolerance used only to reject floating-point residue when the
# normalised boundary signal is compared against zero; not a detection
# threshold (scales with the activation, so picking is scale-invariant)
_REL_EPS = 1e-12


@dataclass(frozen=True)
class DbnConfig:
    min_bpm: float = 55.0
    max_bpm: float = 215.0
    beats_per_bar: tuple[int, ...] = (3, 4)
    transition_lambda: float = 100.0
    observation_lambda: float = 16.0

    def validate(self) -> None:
        if not self.min_bpm < self.max_bpm:
            raise InputError("min_bpm must be below max_bpm")
        if any(b < 2 for b in self.beats_per_bar):
            raise InputError("beats_per_bar candidates must be >= 2")


@dataclass
class Segment:
    start: float
    end: float
    label: str


@dataclass
class AnalysisResult:
    """Decoded events for one track; times in seconds."""

    beats: np.ndarray
    downbeats: np.ndarray
    segments: list[Segment]
    boundary_times: np.ndarray
    duration: float

    def validate(self) -> None:
        if (np.diff(self.beats) <= 0).any():
            raise InputError("beat times must be strictly ascending")
        beat_set = self.beats
        for t in self.downbeats:
            if np.abs(beat_set - t).min(initial=np.inf) > 1e-3:
                raise InputError("every downbeat must also be a beat")
        if self.segments:
            if abs(self.segments[0].start) > 1e-6:
                raise InputError("first segment must start at 0")
            if abs(self.segments[-1].end - self.duration) > 1e-6:
                raise InputError("last segment must end at the duration")
            for a, b in zip(self.segments, self.segments[1:]):
                if abs(a.end - b.start) > 1e-6 or b.start <= a.start:
                    raise InputError("segments must tile the track")


# ---------------------------------------------------------------------------
# bar-pointer Viterbi
# ---------------------------------------------------------------------------

class _BarStateSpace:
    """Flat enumeration of (bar, tempo, phase) states for one bar length."""

    def __init__(self, beats_per_bar: int, taus: np.ndarray):
        self.b = beats_per_bar
        self.taus = taus
        per_bar = int(taus.sum())
        self.n = beats_per_bar * per_bar
        self.bar = np.empty(self.n, dtype=np.int32)
        self.tau = np.empty(self.n, dtype=np.int32)
        self.phase = np.empty(self.n, dtype=np.int32)
        # first_phase[bar, tau_index] -> state id of phase 0
        self.first = np.empty((beats_per_bar, len(taus)), dtype=np.int64)
        self.last = np.empty((beats_per_bar, len(taus)), dtype=np.int64)
        pos = 0
        for bar in range(beats_per_bar):
            for ti, tau in enumerate(taus):
                tau = int(tau)
                sl = slice(pos, pos + tau)
                self.bar[sl] = bar
                self.tau[sl] = tau
                self.phase[sl] = np.arange(tau)
                self.first[bar, ti] = pos
                self.last[bar, ti] = pos + tau - 1
                pos += tau


def _decode_single(beat: np.ndarray, downbeat: np.ndarray, fps: float,
                   cfg: DbnConfig, beats_per_bar: int):
    taus = np.arange(int(np.ceil(fps * 60.0 / cfg.max_bpm)),
                     int(np.floor(fps * 60.0 / cfg.min_bpm)) + 1)
    space = _BarStateSpace(beats_per_bar, taus)
    nt = len(taus)
    frames = len(beat)

    # emission classes: 0 = off-beat, 1 = beat window, 2 = downbeat window
    in_window = space.phase < space.tau / cfg.observation_lambda
    obs_class = np.where(in_window, np.where(space.bar == 0, 2, 1), 0)

    b = np.clip(beat, 1e-6, 1.0)
    d = np.clip(downbeat, 1e-6, 1.0)
    rest = np.clip(1.0 - beat - downbeat, 1e-6, 1.0) / (cfg.observation_lambda - 1.0)
    obs_log = np.stack([np.log(rest), np.log(b), np.log(d)], axis=1)  # [T, 3]

    ratio = taus[None, :].astype(np.float64) / taus[:, None]
    penalty = -cfg.transition_lambda * np.abs(ratio - 1.0)            # [old, new]

    delta = np.full(space.n, -np.log(space.n), dtype=np.float64)
    delta += obs_log[0, obs_class]
    pointers = np.empty((frames, beats_per_bar, nt), dtype=np.int16)
    pointers[0] = -1
    shifted = np.empty_like(delta)
    first_idx = space.first
    last_idx = space.last

    for t in range(1, frames):
        # within-beat advance: phase f comes from f-1 (contiguous layout)
        shifted[1:] = delta[:-1]
        shifted[0] = -np.inf
        for bar in range(beats_per_bar):
            prev_bar = bar - 1 if bar else beats_per_bar - 1
            ends = delta[last_idx[prev_bar]]                 # [old tempo]
            cand = ends[:, None] + penalty                   # [old, new]
            best_old = cand.argmax(axis=0)
            shifted[first_idx[bar]] = cand[best_old, np.arange(nt)]
            pointers[t, bar] = best_old
        shifted += obs_log[t, obs_class]
        delta, shifted = shifted, delta

    # backtrace: within a beat the predecessor is deterministic
    state = int(delta.argmax())
    loglik = float(delta[state])
    path = np.empty(frames, dtype=np.int64)
    path[-1] = state
    for t in range(frames - 1, 0, -1):
        if space.phase[state] > 0:
            state -= 1
        else:
            bar = int(space.bar[state])
            prev_bar = bar - 1 if bar else beats_per_bar - 1
            ti = int(np.searchsorted(taus, space.tau[state]))
            old_ti = int(pointers[t, bar, ti])
            state = int(last_idx[prev_bar, old_ti])
        path[t - 1] = state

    beat_frames = np.flatnonzero(space.phase[path] == 0)
    down_frames = beat_frames[space.bar[path[beat_frames]] == 0]
    return beat_frames / fps, down_frames / fps, loglik


def dbn_decode(beat: np.ndarray, downbeat: np.ndarray, fps: float,
               cfg: DbnConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Beat and downbeat times from per-frame activations.

    Decodes one bar-pointer model per candidate bar length and keeps the
    solution with the best final log-likelihood.
    """
    cfg = cfg or DbnConfig()
    cfg.validate()
    beat = np.asarray(beat, dtype=np.float64)
    downbeat = np.asarray(downbeat, dtype=np.float64)
    if beat.size == 0:
        raise InputError("empty beat activation")
    if beat.shape != downbeat.shape:
        raise InputError("beat and downbeat activations must align")
    if beat.size < fps:
        raise InputError("need at least one second of activations")
    for arr, name in ((beat, "beat"), (downbeat, "downbeat")):
        if ((arr < 0) | (arr > 1)).any() or not np.isfinite(arr).all():
            raise InputError(f"{name} activation outside [0, 1]")

    best = None
    for bpb in cfg.beats_per_bar:
        beats, downs, loglik = _decode_single(beat, downbeat, fps, cfg, bpb)
        if best is None or loglik > best[2]:
            best = (beats, downs, loglik)
    return best[0], best[1]


# ---------------------------------------------------------------------------
# boundary picking and labeling
# ---------------------------------------------------------------------------

def pick_boundaries(boundary: np.ndarray, fps: float, window_s: float = 24.0,
                    peak_window_s: float = 6.0, edge_s: float = 1.0) -> np.ndarray:
    """Boundary times from the boundary activation (no threshold).

    The activation is normalised by subtracting a centred sliding mean
    (window truncated at the track edges); a frame is picked when the
    normalised value is positive and strictly maximal within the peak
    window, with ties going to the earliest frame. Picks within
    ``edge_s`` of the track edges are dropped; the edges themselves are
    implicit boundaries.
    """
    act = np.asarray(boundary, dtype=np.float64)
    if act.ndim != 1:
        raise InputError("boundary activation must be one-dimensional")
    t_total = act.size
    if t_total == 0:
        return np.empty(0)
    if ((act < 0) | (act > 1)).any():
        raise InputError("boundary activation outside [0, 1]")

    half = int(round(window_s * fps / 2))
    csum = np.concatenate([[0.0], np.cumsum(act)])
    lo = np.maximum(np.arange(t_total) - half, 0)
    hi = np.minimum(np.arange(t_total) + half + 1, t_total)
    local_mean = (csum[hi] - csum[lo]) / (hi - lo)
    n = act - local_mean

    eps = _REL_EPS * max(float(np.abs(act).max()), 1.0)
    half_peak = int(round(peak_window_s * fps))
    candidates = np.flatnonzero(n > eps)
    picked = []
    for t in candidates:
        w_lo = max(t - half_peak, 0)
        w_hi = min(t + half_peak + 1, t_total)
        seg = n[w_lo:w_hi]
        if n[t] < seg.max():
            continue
        if int(w_lo + seg.argmax()) != t:        # earlier equal value wins
            continue
        picked.append(t)
    times = np.asarray(picked, dtype=np.float64) / fps
    duration = t_total / fps
    keep = (times >= edge_s) & (times <= duration - edge_s)
    return times[keep]


def label_segments(labels: np.ndarray, boundaries: np.ndarray, duration: float,
                   vocab: tuple[str, ...]) -> list[Segment]:
    """Split [0, duration] at the boundaries and label each span by the
    highest mean per-frame label probability (ties to the lower index)."""
    labels = np.asarray(labels)
    frames, n_vocab = labels.shape
    if n_vocab != len(vocab):
        raise InputError("label matrix does not match the vocabulary")
    fps = frames / duration
    edges = [0.0] + [float(b) for b in boundaries] + [duration]
    for a, b in zip(edges, edges[1:]):
        if b <= a:
            raise InputError("boundaries must be strictly ascending inside the track")
    segments = []
    for a, b in zip(edges, edges[1:]):
        lo = int(round(a * fps))
        hi = max(int(round(b * fps)), lo + 1)
        mean = labels[lo:min(hi, frames)].mean(axis=0)
        segments.append(Segment(start=a, end=b, label=vocab[int(mean.argmax())]))
    return segments


def analyze_activations(acts, dbn_cfg: DbnConfig | None = None,
                        vocab: tuple[str, ...] | None = None) -> AnalysisResult:
    """Full decode of one track's activations into an AnalysisResult."""
    from .model import DEFAULT_VOCAB

    vocab = vocab or DEFAULT_VOCAB
    beats, downbeats = dbn_decode(acts.beat, acts.downbeat, acts.fps, dbn_cfg)
    boundaries = pick_boundaries(acts.boundary, acts.fps)
    duration = acts.num_frames / acts.fps
    segments = label_segments(acts.labels, boundaries, duration, vocab)
    result = AnalysisResult(beats=beats, downbeats=downbeats, segments=segments,
                            boundary_times=boundaries, duration=duration)
    result.validate()
    return result
