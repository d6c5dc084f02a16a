"""Episode and dataset containers plus line-delimited serialization.

A dataset file is UTF-8 JSON lines: one header record, then for every
episode a meta record followed by one row per timestep. Stage labels in
the dataset rows are the *training* labels (null when unlabeled); the
simulator's ground-truth stage trace lives in episode meta and is never
read by training code. Soft labels travel in a sidecar file with per-frame
records ``{t, hard_stage, soft, source}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

DATASET_FORMAT_VERSION = 1
LABELS_FORMAT_VERSION = 1


@dataclass
class Episode:
    """One demonstration: aligned observation/action (and optional label) sequences."""

    observations: np.ndarray          # (T, d_o)
    actions: np.ndarray               # (T, d_a)
    stages: np.ndarray | None = None  # (T,) int training labels
    soft_stages: np.ndarray | None = None  # (T, d_s) soft training labels
    label_source: str | None = None   # "manual" | "auto"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        if self.observations.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("observations and actions must be 2-D (T, dim)")
        T = self.observations.shape[0]
        if T < 1 or self.actions.shape[0] != T:
            raise ValueError("observations/actions must share length T >= 1")
        if self.stages is not None:
            self.stages = np.asarray(self.stages, dtype=int)
            if self.stages.shape != (T,):
                raise ValueError("stage labels must have one entry per frame")
        if self.soft_stages is not None:
            self.soft_stages = np.asarray(self.soft_stages, dtype=float)
            if self.soft_stages.ndim != 2 or self.soft_stages.shape[0] != T:
                raise ValueError("soft labels must be (T, d_s)")

    def __len__(self) -> int:
        return self.observations.shape[0]

    @property
    def is_labeled(self) -> bool:
        return self.stages is not None

    def true_stages(self) -> np.ndarray:
        """Simulator ground-truth stage trace (oracle-only)."""
        if "true_stages" not in self.meta:
            raise ValueError("episode carries no ground-truth stage trace")
        return np.asarray(self.meta["true_stages"], dtype=int)


@dataclass
class Dataset:
    """A list of episodes from one task, with homogeneous dimensions."""

    episodes: list[Episode]
    family: str
    variant: str
    d_s: int

    def __post_init__(self):
        if self.episodes:
            d_o, d_a = self.episodes[0].observations.shape[1], self.episodes[0].actions.shape[1]
            for ep in self.episodes:
                if ep.observations.shape[1] != d_o or ep.actions.shape[1] != d_a:
                    raise ValueError("episodes have inhomogeneous observation/action dimensions")

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def d_o(self) -> int:
        return self.episodes[0].observations.shape[1]

    @property
    def d_a(self) -> int:
        return self.episodes[0].actions.shape[1]

    @property
    def n_frames(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.episodes[i] for i in indices], self.family, self.variant, self.d_s)

    def with_episodes(self, episodes: list[Episode]) -> "Dataset":
        return Dataset(episodes, self.family, self.variant, self.d_s)


def _row_to_json(t: int, obs: np.ndarray, action: np.ndarray, stage) -> str:
    rec = {
        "t": t,
        "obs": obs.tolist(),
        "action": action.tolist(),
        "stage": None if stage is None else int(stage),
    }
    return json.dumps(rec, separators=(",", ":"))


def save_dataset(dataset: Dataset, path) -> None:
    """Serialize to line-delimited JSON; byte-identical for equal content."""
    lines = [
        json.dumps(
            {
                "format_version": DATASET_FORMAT_VERSION,
                "task": f"{dataset.family}/{dataset.variant}",
                "d_o": dataset.d_o,
                "d_a": dataset.d_a,
                "d_s": dataset.d_s,
                "n_episodes": len(dataset),
            },
            separators=(",", ":"),
        )
    ]
    for idx, ep in enumerate(dataset.episodes):
        lines.append(json.dumps({"episode": idx, "length": len(ep), "meta": ep.meta}, separators=(",", ":"), sort_keys=True))
        stages = ep.stages if ep.stages is not None else [None] * len(ep)
        for t in range(len(ep)):
            lines.append(_row_to_json(t, ep.observations[t], ep.actions[t], stages[t]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = json.loads(lines[0])
    if header["format_version"] != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {header['format_version']}")
    family, variant = header["task"].split("/", 1)
    episodes = []
    pos = 1
    for _ in range(header["n_episodes"]):
        meta_rec = json.loads(lines[pos])
        pos += 1
        T = meta_rec["length"]
        obs = np.empty((T, header["d_o"]))
        acts = np.empty((T, header["d_a"]))
        stages = []
        for t in range(T):
            row = json.loads(lines[pos])
            pos += 1
            obs[t] = row["obs"]
            acts[t] = row["action"]
            stages.append(row["stage"])
        labeled = all(s is not None for s in stages)
        episodes.append(
            Episode(
                observations=obs,
                actions=acts,
                stages=np.array(stages, dtype=int) if labeled else None,
                meta=meta_rec["meta"],
            )
        )
    return Dataset(episodes, family, variant, header["d_s"])


def save_labels(dataset: Dataset, path) -> None:
    """Write the label sidecar: per-episode, per-frame hard/soft labels."""
    lines = [
        json.dumps(
            {"format_version": LABELS_FORMAT_VERSION, "n_episodes": len(dataset), "d_s": dataset.d_s},
            separators=(",", ":"),
        )
    ]
    for idx, ep in enumerate(dataset.episodes):
        if ep.stages is None:
            raise ValueError(f"episode {idx} is unlabeled")
        lines.append(json.dumps({"episode": idx, "length": len(ep)}, separators=(",", ":")))
        for t in range(len(ep)):
            soft = ep.soft_stages[t].tolist() if ep.soft_stages is not None else None
            rec = {
                "t": t,
                "hard_stage": int(ep.stages[t]),
                "soft": soft,
                "source": ep.label_source or "manual",
            }
            lines.append(json.dumps(rec, separators=(",", ":")))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_labels(dataset: Dataset, path) -> Dataset:
    """Return a copy of ``dataset`` with labels applied from a sidecar file."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = json.loads(lines[0])
    if header["format_version"] != LABELS_FORMAT_VERSION:
        raise ValueError(f"unsupported labels format version {header['format_version']}")
    if header["n_episodes"] != len(dataset):
        raise ValueError("label sidecar does not match dataset episode count")
    episodes = []
    pos = 1
    for idx, ep in enumerate(dataset.episodes):
        ep_rec = json.loads(lines[pos])
        pos += 1
        if ep_rec["length"] != len(ep):
            raise ValueError(f"label sidecar length mismatch on episode {idx}")
        hard = np.empty(len(ep), dtype=int)
        soft_rows = []
        sources = set()
        for t in range(len(ep)):
            row = json.loads(lines[pos])
            pos += 1
            hard[t] = row["hard_stage"]
            soft_rows.append(row["soft"])
            sources.add(row["source"])
        has_soft = all(s is not None for s in soft_rows)
        episodes.append(
            replace(
                ep,
                stages=hard,
                soft_stages=np.array(soft_rows) if has_soft else None,
                label_source=sources.pop() if len(sources) == 1 else "mixed",
            )
        )
    return dataset.with_episodes(episodes)
