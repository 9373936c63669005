"""Window-limited conversation graph with speaker-pair and temporal edge types.

Both graph branches share the same edge set; only the per-edge relation ids
differ. Message direction is source j -> destination i.
"""

from __future__ import annotations

from dataclasses import dataclass, field

TEMPORAL_PAST = 0
TEMPORAL_PRESENT = 1
TEMPORAL_FUTURE = 2
NUM_TEMPORAL_TYPES = 3


def speaker_type(i: int, j: int, speakers, num_speakers: int) -> int:
    """Ordered speaker-pair id of edge (j -> i): speakers[i] * S + speakers[j]."""
    si, sj = speakers[i], speakers[j]
    if si >= num_speakers or sj >= num_speakers:
        raise ValueError(
            f"speaker index out of range: ({si}, {sj}) with vocabulary size {num_speakers}")
    return si * num_speakers + sj


def temporal_type(i: int, j: int) -> int:
    if j < i:
        return TEMPORAL_PAST
    if j == i:
        return TEMPORAL_PRESENT
    return TEMPORAL_FUTURE


@dataclass
class TypedGraph:
    length: int
    window: int
    num_speakers: int
    edges: list = field(default_factory=list)          # (src j, dst i)
    speaker_types: list = field(default_factory=list)  # per edge, in [0, S^2)
    temporal_types: list = field(default_factory=list)  # per edge, in {0,1,2}

    def neighbors_by_relation(self, family: str):
        """family -> {relation id: per-node source lists}.

        Families: 'speaker' (S^2 relations), 'temporal' (3),
        'coupled' (3*S^2, id = temporal * S^2 + speaker).
        """
        if family == "speaker":
            count, ids = self.num_speakers ** 2, self.speaker_types
        elif family == "temporal":
            count, ids = NUM_TEMPORAL_TYPES, self.temporal_types
        elif family == "coupled":
            s2 = self.num_speakers ** 2
            count = NUM_TEMPORAL_TYPES * s2
            ids = [t * s2 + s for s, t in zip(self.speaker_types, self.temporal_types)]
        else:
            raise ValueError(f"unknown relation family: {family}")
        table = {r: [[] for _ in range(self.length)] for r in range(count)}
        for (src, dst), r in zip(self.edges, ids):
            table[r][dst].append(src)
        return table

    def dump_table(self) -> str:
        """Debug text table: one row per edge with both relation ids."""
        lines = ["src\tdst\tspeaker_type\ttemporal_type"]
        for (src, dst), a, b in zip(self.edges, self.speaker_types, self.temporal_types):
            lines.append(f"{src}\t{dst}\t{a}\t{b}")
        return "\n".join(lines)


def build_graph(speakers, window: int, num_speakers: int) -> TypedGraph:
    """Connect each node to every node within `window` positions, self included.

    Indices are 0-based: node i receives from j in [max(i-w, 0), min(i+w, L-1)].
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    length = len(speakers)
    if length < 1:
        raise ValueError("conversation must contain at least one utterance")
    graph = TypedGraph(length=length, window=window, num_speakers=num_speakers)
    for i in range(length):
        for j in range(max(i - window, 0), min(i + window, length - 1) + 1):
            graph.edges.append((j, i))
            graph.speaker_types.append(speaker_type(i, j, speakers, num_speakers))
            graph.temporal_types.append(temporal_type(i, j))
    return graph
