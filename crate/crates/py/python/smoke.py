"""Smoke test for the Python bindings: python python/smoke.py"""

import json

import maskflow_py as mf


def main():
    print("maskflow", mf.version())

    report = json.loads(mf.complexity("paper"))
    rows = {r["submodule"]: r for r in report["rows"]}
    assert rows["Image Encoder"]["params"] == 6_270_592, rows
    assert rows["Multi-Modal Projector"]["params"] == 1_312_256, rows

    p = mf.render_portrait(7, 64)
    shape, image = p["shape"], p["image"]
    assert shape == [3, 64, 64] and len(image) == 3 * 64 * 64
    assert "hair" in p["regions"] and len(p["regions"]["hair"]) == 64 * 64

    assert mf.psnr(image, image, shape) == 100.0
    assert abs(mf.ssim(image, image, shape) - 1.0) < 1e-9

    zero = [0.0] * (64 * 64)
    src = "a portrait photo of a person"
    out, rep = mf.edit(image, shape, src, src, zero, n=10, t=0, strategy="value_only")
    rep = json.loads(rep)
    assert rep["normalized"]["strategy"] == "value_only", rep["normalized"]
    err = max(abs(a - b) for a, b in zip(image, out))
    assert err < 1e-2, err

    out, rep = mf.edit(image, shape, src, src + " with dark hair", p["regions"]["hair"], n=8, t=2)
    rep = json.loads(rep)
    print("s2d edit: PSNR %.2f dB, out-of-mask %.2f dB" % (rep["metrics"]["psnr"], rep["metrics"]["psnr_out_of_mask"]))

    try:
        mf.edit(image, shape, src, src, zero, strategy="bogus")
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("bogus strategy accepted")
    print("ok")


if __name__ == "__main__":
    main()
