"""Encodes the text fixture with struct, independently of the crate's writer."""
import struct, pathlib

here = pathlib.Path(__file__).parent
cams = [(1, 0, 640, 480, [500.5, 320, 240]), (2, 1, 800, 600, [610.25, 612.75, 401.5, 299.25])]
imgs = [
    (1, [1, 0, 0, 0], [0.5, -0.25, 3], 1, "img_a.png", [(100.5, 200.25, 1), (300, 100, 2), (10, 10, -1)]),
    (2, [0.5, 0.5, 0.5, 0.5], [-1, 2, 4.5], 2, "img_b.png", [(150, 250, 1), (350.75, 120.5, 3)]),
    (3, [0.7071067811865476, 0, 0.7071067811865476, 0], [2, 0, 1], 1, "img_c.png", []),
]
pts = [
    (1, [0.1, 0.2, 0.3], [255, 0, 10], 0.5, [(1, 0), (2, 0)]),
    (2, [-1.5, 2.25, 7], [1, 2, 3], 1.25, [(1, 1)]),
    (3, [3, -4, 5.5], [200, 100, 50], 0.0, [(2, 1)]),
]
out = here / "colmap_bin"
b = struct.pack("<Q", len(cams))
for cid, model, w, h, params in cams:
    b += struct.pack("<iiQQ", cid, model, w, h) + struct.pack("<%dd" % len(params), *params)
(out / "cameras.bin").write_bytes(b)
b = struct.pack("<Q", len(imgs))
for iid, q, t, cid, name, kps in imgs:
    b += struct.pack("<I4d3dI", iid, *q, *t, cid) + name.encode() + b"\0"
    b += struct.pack("<Q", len(kps))
    for x, y, pid in kps:
        b += struct.pack("<ddQ", x, y, 2**64 - 1 if pid < 0 else pid)
(out / "images.bin").write_bytes(b)
b = struct.pack("<Q", len(pts))
for pid, xyz, rgb, err, track in pts:
    b += struct.pack("<Q3d3Bd", pid, *xyz, *rgb, err) + struct.pack("<Q", len(track))
    for iid, idx in track:
        b += struct.pack("<II", iid, idx)
(out / "points3D.bin").write_bytes(b)
