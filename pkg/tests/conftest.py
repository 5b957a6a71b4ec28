import numpy as np
import pytest

from graphground.ingest import Detection, FrameRecord, rle_encode
from graphground.providers import CachedEmbedder, MockEmbedder, mock_embed
from graphground.scene import AABB, ObjectInstance, RelationEdge, SceneGraph3D


@pytest.fixture
def emb():
    return CachedEmbedder(MockEmbedder())


def make_obj(oid, label, lo, hi, n=0, seed=0, embedding=None):
    box = AABB(lo, hi)
    rng = np.random.default_rng(seed + oid)
    pts = box.lo + rng.random((n, 3)) * box.size if n else np.empty((0, 3))
    e = mock_embed(label) if embedding is None else embedding
    return ObjectInstance(oid, label, pts, box, e, (f"a {label}",))


def make_scene(objs, edges=()):
    return SceneGraph3D({o.id: o for o in objs}, tuple(RelationEdge(*e) for e in edges))


def make_frame(markers, frame_id=0, width=8, height=6):
    """Frame whose detection k covers one pixel column per marker."""
    dets = []
    for k, (marker, label) in enumerate(markers):
        mask = np.zeros((height, width), dtype=bool)
        mask[:, k % width] = True
        dets.append(Detection(marker, label, 0.9, tuple(rle_encode(mask)), None, mask))
    depth = np.full((height, width), 1000, dtype=np.uint16)
    return FrameRecord(frame_id, (10.0, 10.0, width / 2, height / 2), np.eye(4), "", width, height, tuple(dets), depth)


# --- acceptance reporting: one PASS/FAIL line per criterion -----------------

ACCEPTANCE_LINES = []


@pytest.fixture
def accept():
    def report(name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
