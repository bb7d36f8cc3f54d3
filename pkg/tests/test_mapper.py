import math

import numpy as np
import pytest

from cornercam.errors import EmptyInput
from cornercam.geometry import EdgeSpec
from cornercam.inversion import FrameEstimate
from cornercam.mapper import accumulate_map, load_map


def estimate(objects):
    """objects: (theta_mid, r_fg, h, r_oc) tuples."""
    fg, oc = [], []
    for mid, r_fg, h, r_oc in objects:
        fg.append({"theta_min": mid - 0.05, "theta_max": mid + 0.05, "albedo": 1.0, "range": r_fg, "height": h})
        oc.append({"albedo": 1.0, "range": r_oc})
    return FrameEstimate(len(objects), fg, oc, 1.0)


def sweep(n=14):
    return [estimate([(a, 1.25, 1.1, 2.2 / math.sin(a))]) for a in np.linspace(0.8, 2.4, n)]


def test_single_estimate_gives_one_centerline():
    m = accumulate_map([estimate([(1.5, 1.25, 1.1, 2.2)])])
    assert len(m.segments) == 1 and m.panels == []
    s = m.segments[0]
    assert (s.x, s.y) == pytest.approx((2.2 * math.cos(1.5), 2.2 * math.sin(1.5)))
    assert s.height == pytest.approx(1.1 * 2.2 / 1.25)


def test_sweep_counts_and_wall_line():
    m = accumulate_map(sweep())
    assert len(m.segments) == 14 and len(m.panels) == 13
    assert all(abs(s.y - 2.2) < 1e-12 for s in m.segments)


def test_panels_are_watertight():
    m = accumulate_map(sweep())
    segs = m.segments
    for i, p in enumerate(m.panels):
        assert p.p1 == (segs[i].x, segs[i].y) and p.p2 == (segs[i + 1].x, segs[i + 1].y)
        assert p.height == segs[i].height


def test_order_changes_connectivity_not_placement():
    ests = sweep(6)
    perm = [3, 0, 5, 1, 4, 2]
    a = accumulate_map(ests)
    b = accumulate_map([ests[i] for i in perm])
    pa = sorted((s.x, s.y, s.height) for s in a.segments)
    pb = sorted((s.x, s.y, s.height) for s in b.segments)
    assert pa == pb
    assert [p.p1 for p in a.panels] != [p.p1 for p in b.panels]


def test_two_tracks_follow_nearest_azimuth():
    frames = [estimate([(1.0 + 0.05 * i, 1.0, 1.0, 2.0), (2.0 - 0.05 * i, 1.3, 1.0, 2.4)]) for i in range(4)]
    m = accumulate_map(frames)
    tracks = {s.track for s in m.segments}
    assert len(tracks) == 2 and len(m.panels) == 6
    for t in tracks:
        mids = [s.azimuth for s in m.segments if s.track == t]
        assert np.all(np.abs(np.diff(mids)) < 0.06)


def test_merged_frame_keeps_nearest_track():
    frames = [
        estimate([(1.4, 1.0, 1.0, 2.0), (1.8, 1.3, 1.0, 2.4)]),
        estimate([(1.58, 1.0, 1.0, 2.0)]),
        estimate([(1.5, 1.0, 1.0, 2.0), (1.75, 1.3, 1.0, 2.4)]),
    ]
    m = accumulate_map(frames)
    assert len(m.segments) == 5 and len({s.track for s in m.segments}) == 2


def test_empty_inputs_raise():
    with pytest.raises(EmptyInput):
        accumulate_map([])
    with pytest.raises(EmptyInput):
        accumulate_map([FrameEstimate(0, [], [], 1.0)])


def test_frames_without_objects_are_skipped():
    m = accumulate_map([estimate([(1.5, 1.25, 1.1, 2.2)]), FrameEstimate(0, [], [], 1.0), estimate([(1.6, 1.25, 1.1, 2.2)])])
    assert [s.frame for s in m.segments] == [0, 2] and len(m.panels) == 1


def test_custom_edge_offsets_centerlines():
    edge = EdgeSpec(base=[0.5, 0.0, 0.0])
    m = accumulate_map([estimate([(math.pi / 2, 1.0, 1.0, 2.0)])], edge)
    assert (m.segments[0].x, m.segments[0].y) == pytest.approx((0.5, 2.0))


def test_json_and_csv_outputs(tmp_path):
    m = accumulate_map(sweep(4))
    m.write_json(tmp_path / "m.json")
    m.write_csv(tmp_path / "m.csv")
    back = load_map(tmp_path / "m.json")
    assert back.to_dict() == m.to_dict()
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "track,order,x,y,height,frame" and len(lines) == 5
