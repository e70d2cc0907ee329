"""Diarization scoring: RTTM parsing/emission, DER with collar, JER.

All interval arithmetic runs on integer milliseconds, so region building is
exact and fixture values reproduce to the nanosecond. Conventions follow the
usual NIST md-eval behaviour: optimal speaker mapping by matched time, a
no-score collar excised around every reference segment boundary, and
multi-speaker counting inside overlap regions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ParseError, UndefinedDER

# Above this many speakers on either side, mapping switches from exhaustive
# permutation search to the assignment solver.
EXHAUSTIVE_MAPPING_CAP = 8


@dataclass(frozen=True)
class RttmSegment:
    recording_id: str
    onset_s: float
    duration_s: float
    speaker_id: str

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ParseError(f"segment duration must be positive, got {self.duration_s}")
        if self.onset_s < 0:
            raise ParseError(f"segment onset must be >= 0, got {self.onset_s}")
        for name in (self.recording_id, self.speaker_id):
            if not name or any(c.isspace() for c in name):
                raise ParseError(f"identifier {name!r} must be non-empty and whitespace-free")


@dataclass
class ScoreReport:
    miss_s: float
    falarm_s: float
    confusion_s: float
    scored_speech_s: float
    der: float
    jer: float | None = None
    mapping: list[tuple[str, str, str]] = field(default_factory=list)  # (rec, ref, hyp)


def parse_rttm(lines) -> list[RttmSegment]:
    """Parse RTTM content (iterable of lines or a whole string); sorts output."""
    if isinstance(lines, str):
        lines = lines.splitlines()
    segments = []
    for no, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith(";;"):
            continue
        parts = text.split()
        if len(parts) != 10 or parts[0] != "SPEAKER":
            raise ParseError("expected 'SPEAKER <rec> 1 <onset> <dur> <NA> <NA> <spk> <NA> <NA>'", no)
        try:
            onset, dur = float(parts[3]), float(parts[4])
        except ValueError:
            raise ParseError(f"non-numeric onset/duration {parts[3]!r} {parts[4]!r}", no) from None
        try:
            segments.append(RttmSegment(parts[1], onset, dur, parts[7]))
        except ParseError as exc:
            raise ParseError(str(exc), no) from None
    segments.sort(key=lambda s: (s.recording_id, s.onset_s, s.speaker_id, s.duration_s))
    return segments


def read_rttm(path) -> list[RttmSegment]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_rttm(f)


def emit_rttm(segments) -> str:
    """Canonical RTTM text: sorted, 2-decimal fixed-point seconds."""
    rows = sorted(segments, key=lambda s: (s.recording_id, s.onset_s, s.speaker_id, s.duration_s))
    lines = [
        f"SPEAKER {s.recording_id} 1 {s.onset_s:.2f} {s.duration_s:.2f} <NA> <NA> {s.speaker_id} <NA> <NA>"
        for s in rows
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def write_rttm(path, segments) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(emit_rttm(segments))


def segments_from_activity(activity: np.ndarray, frame_period_s: float,
                           speaker_ids, recording_id: str) -> list[RttmSegment]:
    """Maximal per-speaker runs of active frames, converted to seconds."""
    activity = np.asarray(activity)
    segments = []
    for s, spk in enumerate(speaker_ids):
        col = np.flatnonzero(activity[:, s] > 0)
        if col.size == 0:
            continue
        breaks = np.flatnonzero(np.diff(col) > 1)
        starts = np.concatenate(([col[0]], col[breaks + 1]))
        ends = np.concatenate((col[breaks], [col[-1]])) + 1
        for a, b in zip(starts, ends):
            segments.append(
                RttmSegment(recording_id, a * frame_period_s, (b - a) * frame_period_s, spk)
            )
    return segments


# ---------------------------------------------------------------------------
# interval machinery (integer milliseconds)
# ---------------------------------------------------------------------------


def _ms(x: float) -> int:
    return int(round(x * 1000.0))


def _merge(intervals: list[tuple[int, int]]) -> list[tuple[int, int]]:
    if not intervals:
        return []
    out = []
    for a, b in sorted(intervals):
        if out and a <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return out


def _by_speaker(segments) -> dict[str, list[tuple[int, int]]]:
    table: dict[str, list[tuple[int, int]]] = {}
    for s in segments:
        a = _ms(s.onset_s)
        table.setdefault(s.speaker_id, []).append((a, _ms(s.onset_s + s.duration_s)))
    return {k: _merge(v) for k, v in table.items()}


def _covers(intervals: list[tuple[int, int]], x: int) -> bool:
    for a, b in intervals:
        if a <= x < b:
            return True
        if a > x:
            break
    return False


class _RecordingTally:
    """Sweep over homogeneous regions of one recording."""

    def __init__(self, ref_segs, hyp_segs, collar_ms: int, score_overlap: bool):
        self.ref = _by_speaker(ref_segs)
        self.hyp = _by_speaker(hyp_segs)
        self.ref_ids = sorted(self.ref)
        self.hyp_ids = sorted(self.hyp)

        # Collar zones surround every reference boundary as given in the file.
        zones = []
        for s in ref_segs:
            for b in (_ms(s.onset_s), _ms(s.onset_s + s.duration_s)):
                zones.append((b - collar_ms, b + collar_ms))
        self.excluded = _merge(zones) if collar_ms > 0 else []

        points = set()
        for table in (self.ref, self.hyp):
            for ivs in table.values():
                for a, b in ivs:
                    points.update((a, b))
        for a, b in self.excluded:
            points.update((a, b))
        self.points = sorted(points)
        self.score_overlap = score_overlap

        nr, nh = len(self.ref_ids), len(self.hyp_ids)
        self.matched = np.zeros((nr, nh), dtype=np.int64)  # co-active ms per pair
        self.ref_time = np.zeros(nr, dtype=np.int64)
        self.hyp_time = np.zeros(nh, dtype=np.int64)
        self.region_rows = []  # (dur_ms, ref_active idx tuple, hyp_active idx tuple)
        self.scored_regions = []
        self._sweep()

    def _sweep(self):
        for x, y in zip(self.points[:-1], self.points[1:]):
            if _covers(self.excluded, x):
                continue
            r_act = tuple(i for i, r in enumerate(self.ref_ids) if _covers(self.ref[r], x))
            h_act = tuple(j for j, h in enumerate(self.hyp_ids) if _covers(self.hyp[h], x))
            if not r_act and not h_act:
                continue
            if not self.score_overlap and len(r_act) >= 2:
                continue
            d = y - x
            self.scored_regions.append((x, y))
            self.region_rows.append((d, r_act, h_act))
            for i in r_act:
                self.ref_time[i] += d
                for j in h_act:
                    self.matched[i, j] += d
            for j in h_act:
                self.hyp_time[j] += d

    def best_mapping(self) -> dict[int, int]:
        """ref index -> hyp index maximizing total matched time."""
        nr, nh = self.matched.shape
        if nr == 0 or nh == 0:
            return {}
        if max(nr, nh) <= EXHAUSTIVE_MAPPING_CAP:
            best, best_score = None, -1
            if nr <= nh:
                for perm in itertools.permutations(range(nh), nr):
                    sc = sum(self.matched[i, perm[i]] for i in range(nr))
                    if sc > best_score:
                        best, best_score = {i: perm[i] for i in range(nr)}, sc
            else:
                for perm in itertools.permutations(range(nr), nh):
                    sc = sum(self.matched[perm[j], j] for j in range(nh))
                    if sc > best_score:
                        best, best_score = {perm[j]: j for j in range(nh)}, sc
            mapping = best
        else:
            rows, cols = linear_sum_assignment(-self.matched)
            mapping = dict(zip(rows.tolist(), cols.tolist()))
        return {i: j for i, j in mapping.items() if self.matched[i, j] > 0}

    def errors(self, mapping: dict[int, int]) -> tuple[int, int, int, int]:
        miss = falarm = confusion = scored = 0
        for d, r_act, h_act in self.region_rows:
            nr, nh = len(r_act), len(h_act)
            ncor = sum(1 for i in r_act if mapping.get(i) in h_act)
            miss += d * max(0, nr - nh)
            falarm += d * max(0, nh - nr)
            confusion += d * (min(nr, nh) - ncor)
            scored += d * nr
        return miss, falarm, confusion, scored

    def jer_terms(self, mapping: dict[int, int]) -> list[float]:
        out = []
        for i in range(len(self.ref_ids)):
            if self.ref_time[i] == 0:
                continue  # speaker entirely inside excluded regions
            j = mapping.get(i)
            if j is None:
                out.append(1.0)
                continue
            inter = int(self.matched[i, j])
            union = int(self.ref_time[i]) + int(self.hyp_time[j]) - inter
            out.append(1.0 - inter / union if union > 0 else 1.0)
        return out


def _group(segments) -> dict[str, list[RttmSegment]]:
    table: dict[str, list[RttmSegment]] = {}
    for s in segments:
        table.setdefault(s.recording_id, []).append(s)
    return table


def scoring_regions(ref_segments, hyp_segments, collar_s: float = 0.0,
                    score_overlap: bool = True) -> dict[str, list[tuple[int, int]]]:
    """Scored (non-excluded, non-empty) regions per recording, in ms."""
    refs, hyps = _group(ref_segments), _group(hyp_segments)
    out = {}
    for rec in sorted(set(refs) | set(hyps)):
        tally = _RecordingTally(refs.get(rec, []), hyps.get(rec, []), _ms(collar_s), score_overlap)
        out[rec] = tally.scored_regions
    return out


def der(ref_segments, hyp_segments, collar_s: float = 0.0,
        score_overlap: bool = True, compute_jer: bool = False) -> ScoreReport:
    """Score hypothesis segments against the reference.

    Raises UndefinedDER when the reference contributes no scored speech.
    """
    refs, hyps = _group(ref_segments), _group(hyp_segments)
    miss = falarm = confusion = scored = 0
    mapping_rows = []
    jer_terms: list[float] = []
    for rec in sorted(set(refs) | set(hyps)):
        tally = _RecordingTally(refs.get(rec, []), hyps.get(rec, []), _ms(collar_s), score_overlap)
        mapping = tally.best_mapping()
        m, f, c, s = tally.errors(mapping)
        miss += m
        falarm += f
        confusion += c
        scored += s
        for i, j in sorted(mapping.items()):
            mapping_rows.append((rec, tally.ref_ids[i], tally.hyp_ids[j]))
        if compute_jer:
            jer_terms.extend(tally.jer_terms(mapping))

    if scored == 0:
        raise UndefinedDER("reference contains no scored speech")
    report = ScoreReport(
        miss_s=miss / 1000.0,
        falarm_s=falarm / 1000.0,
        confusion_s=confusion / 1000.0,
        scored_speech_s=scored / 1000.0,
        der=(miss + falarm + confusion) / scored,
        mapping=mapping_rows,
    )
    if compute_jer:
        report.jer = float(np.mean(jer_terms)) if jer_terms else 1.0
    return report


def jer(ref_segments, hyp_segments, collar_s: float = 0.0,
        score_overlap: bool = True) -> float:
    """Mean per-reference-speaker Jaccard error under the DER speaker mapping."""
    return der(ref_segments, hyp_segments, collar_s, score_overlap, compute_jer=True).jer
