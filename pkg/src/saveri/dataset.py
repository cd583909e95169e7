"""Segmentation of episodes into safety-assessment data and scoring.

A segment starting at step k of an episode carries the state at k plus the
next H desired output points (hold-last padded past the end of the plan).
Its unsafety score is 0 for safe episodes and gamma**R otherwise, where R
is the number of steps remaining until the episode terminated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import jsonio
from .dynamics import ClosedLoopSystem, Episode, SafeSet, rollout_episode

Array = np.ndarray


class DatasetError(ValueError):
    pass


@dataclass
class Segment:
    state: Array          # (n_s,)  state at segment start
    desired: Array        # (H, n_z) upcoming desired outputs
    realized: Array       # (H, n_z) realized outputs, hold-last padded
    episode_id: int
    start: int
    terminal: bool        # realized outputs were truncated by termination

    @property
    def errors(self) -> Array:
        return self.desired - self.realized

    def flat_input(self) -> Array:
        """Safety assessment input: [state; desired trajectory], flattened."""
        return np.concatenate([self.state, self.desired.ravel()])


@dataclass
class TrainingDatum:
    segment: Segment
    score: float  # unsafety score in [0, 1]


@dataclass
class FeedbackDatum:
    segment: Segment       # from the real system
    score_real: float      # unsafety score of the real episode
    score_nominal: float   # unsafety score of the nominal replay


def _score(safe: bool, termination_index: int, start: int, gamma: float) -> float:
    if safe:
        return 0.0
    return gamma ** max(termination_index - start, 0)


def unsafety_score(episode: Episode, segment_start: int, gamma: float) -> float:
    """0 for safe episodes, gamma**(T' - segment_start) otherwise."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if segment_start < 0 or segment_start > episode.termination_index:
        raise ValueError(
            f"segment start {segment_start} outside [0, {episode.termination_index}]")
    if episode.safe:
        return 0.0
    return gamma ** (episode.termination_index - segment_start)


def _segment_starts(episode: Episode, stride: int) -> range:
    last = min(episode.termination_index, episode.T - 1)
    return range(0, last + 1, stride)


def segment_episode(episode: Episode, H: int, stride: int = 1,
                    episode_id: int = 0) -> list[Segment]:
    """Split an episode into segments starting every ``stride`` steps.

    Starts run 0, stride, ... up to min(T', T-1). Desired and realized
    sequences are hold-last padded to length H; segments whose realized
    outputs were cut short by termination are flagged terminal.
    """
    if H < 1:
        raise ValueError("segment horizon H must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    T = episode.T
    t_term = episode.termination_index
    segments = []
    for k in _segment_starts(episode, stride):
        des_idx = np.minimum(np.arange(k, k + H), T - 1)
        out_idx = np.minimum(np.arange(k, k + H), t_term)
        segments.append(Segment(
            state=episode.states[k].copy(),
            desired=episode.desired[des_idx].copy(),
            realized=episode.outputs[out_idx].copy(),
            episode_id=episode_id,
            start=k,
            terminal=bool(k + H - 1 > t_term),
        ))
    return segments


def build_training_set(episodes: Sequence[Episode], H: int, gamma: float,
                       stride: int = 1) -> list[TrainingDatum]:
    """All segments of all episodes with their unsafety scores, ordered by
    (episode index, start index)."""
    if len(episodes) == 0:
        raise DatasetError("no episodes given")
    data = []
    for i, ep in enumerate(episodes):
        for seg in segment_episode(ep, H, stride, episode_id=i):
            data.append(TrainingDatum(seg, unsafety_score(ep, seg.start, gamma)))
    return data


def build_feedback_set(real_episode: Episode, nominal_system: ClosedLoopSystem,
                       safe_set: SafeSet, H: int, gamma: float,
                       stride: int = 1, episode_id: int = 0) -> list[FeedbackDatum]:
    """Feedback data from one real episode plus a nominal replay.

    The nominal system is replayed from the real episode's initial state with
    the real desired trajectory and zero disturbances; both trajectories are
    scored per segment start. Segments whose start lies beyond the replay's
    termination score the replay at the capped value gamma**0 = 1.
    """
    if nominal_system.n_s != real_episode.states.shape[1] or \
            nominal_system.n_z != real_episode.desired.shape[1]:
        raise ValueError("nominal system dimensions do not match the episode")
    T = real_episode.T
    zeros = np.zeros((T, nominal_system.n_w))
    replay = rollout_episode(
        nominal_system, safe_set, T, real_episode.seed,
        initial_state=real_episode.initial_state,
        desired=real_episode.desired,
        disturbance_override=zeros)
    data = []
    for seg in segment_episode(real_episode, H, stride, episode_id=episode_id):
        lam_real = _score(real_episode.safe, real_episode.termination_index,
                          seg.start, gamma)
        lam_nom = _score(replay.safe, replay.termination_index, seg.start, gamma)
        data.append(FeedbackDatum(seg, lam_real, lam_nom))
    return data


# ---------------------------------------------------------------------------
# persistence


def save_dataset(data: Sequence[TrainingDatum] | Sequence[FeedbackDatum],
                 path, *, system: str = "", H: Optional[int] = None,
                 gamma: Optional[float] = None, stride: Optional[int] = None) -> None:
    if len(data) == 0:
        raise DatasetError("empty dataset")
    is_feedback = isinstance(data[0], FeedbackDatum)
    records = []
    for d in data:
        seg = d.segment
        rec = {
            "state": seg.state,
            "desired": seg.desired,
            "realized": seg.realized,
            "lambda": d.score_real if is_feedback else d.score,
        }
        if is_feedback:
            rec["lambda_hat"] = d.score_nominal
        rec["episode"] = seg.episode_id
        rec["start"] = seg.start
        rec["terminal"] = seg.terminal
        records.append(rec)
    H_val = H if H is not None else len(data[0].segment.desired)
    doc = {
        "meta": {"system": system, "H": H_val, "gamma": gamma,
                 "stride": stride, "n_t": len(records)},
        "data": records,
    }
    jsonio.dump_file(doc, path)


def _require(rec: dict, key: str, index: int):
    if key not in rec:
        raise DatasetError(f"datum {index}: missing required field '{key}'")
    return rec[key]


def load_dataset(path) -> tuple[dict, list[TrainingDatum] | list[FeedbackDatum]]:
    """Load a dataset file; returns (meta, data). Feedback datasets are
    recognized by the presence of 'lambda_hat'."""
    try:
        doc = jsonio.load_file(path)
    except ValueError as e:
        raise DatasetError(f"malformed dataset file {path}: {e}") from e
    if "data" not in doc:
        raise DatasetError("dataset file missing 'data' field")
    records = doc["data"]
    if len(records) == 0:
        raise DatasetError("empty dataset")
    out = []
    feedback = "lambda_hat" in records[0]
    for i, rec in enumerate(records):
        seg = Segment(
            state=np.asarray(_require(rec, "state", i), dtype=float),
            desired=np.asarray(_require(rec, "desired", i), dtype=float),
            realized=np.asarray(_require(rec, "realized", i), dtype=float),
            episode_id=int(_require(rec, "episode", i)),
            start=int(_require(rec, "start", i)),
            terminal=bool(rec.get("terminal", False)),
        )
        lam = float(_require(rec, "lambda", i))
        if feedback:
            out.append(FeedbackDatum(seg, lam, float(_require(rec, "lambda_hat", i))))
        else:
            out.append(TrainingDatum(seg, lam))
    return doc.get("meta", {}), out


def training_inputs(data: Sequence[TrainingDatum] | Sequence[FeedbackDatum]) -> Array:
    """Stack flattened safety assessment inputs into an (n, n_s + H*n_z) array."""
    return np.asarray([d.segment.flat_input() for d in data])


def error_sequences(data: Sequence[TrainingDatum] | Sequence[FeedbackDatum]) -> Array:
    """Stack per-segment error sequences into an (n, H, n_z) array."""
    return np.asarray([d.segment.errors for d in data])


def scores(data: Sequence[TrainingDatum]) -> Array:
    return np.asarray([d.score for d in data])
