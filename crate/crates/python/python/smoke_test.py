"""Exercise the extension module end to end. Run after `maturin develop`."""

import sys

import pqsuite_py as pq


def main():
    # 4x4 square of class 1 against its top half: IoU 8/16 is not a match
    cls = [1 if y < 4 and x < 4 else 0 for y in range(6) for x in range(6)]
    gt = pq.Annotation("a", cls, cls, 6, 6)
    half = [c if i // 6 < 2 else 0 for i, c in enumerate(cls)]
    pred = pq.Annotation("a", half, half, 6, 6)
    assert gt.segment_table() == [(1, 1, 16, False)], gt.segment_table()
    assert gt.validate() == []

    assert pq.iou(8, 16, 8) == 0.5
    assert pq.quality_ratio(0, 0, 0, 0.0) is None
    pq_, sq, rq = pq.quality_ratio(2, 1, 1, 1.5)
    assert abs(pq_ - sq * rq) < 1e-12
    assert pq.boundary_iou(gt, 1, gt, 1, radius_px=1) == 1.0

    report = pq.evaluate([(gt, gt)])
    assert report["aggregate"]["pq"] == 1.0, report["aggregate"]
    report = pq.evaluate([(gt, pred)], metrics=["pq"], denominator="eq1")
    counts = report["per_class"]["1"]
    assert (counts["tp"], counts["fp"], counts["fn"]) == (0, 1, 1), counts

    png = gt.to_png()
    w, h, ids = pq.decode_png(png)
    assert (w, h) == (6, 6) and ids == gt.instance_plane()
    assert pq.encode_png(w, h, ids) == png

    scene = pq.generate_scene(7, width=48, height=48)
    assert scene == pq.generate_scene(7, width=48, height=48)
    eroded = pq.perturb(scene, "erode", 1, seed=3)
    r = pq.evaluate([(scene, eroded)], jobs=2)
    assert 0.0 < r["aggregate"]["pq"] < 1.0

    try:
        pq.Annotation("bad", [0], [5], 1, 1)
    except pq.PqsuiteError:
        pass
    else:
        raise AssertionError("void pixel with an instance was accepted")

    assert pq.generate_color(1, 1) == pq.generate_color(1, 1)
    assert scene.render(seed=1)[:8] == b"\x89PNG\r\n\x1a\n"

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
