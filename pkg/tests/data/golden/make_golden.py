"""Regenerates the golden container fixtures.

Run only when the format version changes; the outputs are committed and the
test suite checks that the current code reproduces them byte for byte.
"""

from pathlib import Path

import numpy as np

from caecodec.container import RateTarget, decode_image, encode_image
from caecodec.imageio import encode_netpbm
from caecodec.network import CaeArchitecture, CaeParams, save_checkpoint

HERE = Path(__file__).parent
WIDTH, HEIGHT = 48, 40
RATES = {"rate3": 3.0, "lossless": None}


def golden_image():
    yy, xx = np.mgrid[0:HEIGHT, 0:WIDTH] / 40.0
    img = np.stack([0.5 + 0.4 * np.sin(3 * xx + c) * np.cos(2 * yy - c) for c in (0.0, 1.0, 2.0)], axis=-1)
    # round through 8 bits so the PPM holds exactly what is encoded
    return np.floor(img * 255 + 0.5) / 255


def golden_model():
    return CaeParams.initialize(CaeArchitecture((4, 4, 8, 8, 8, 4), 16), seed=2024)


def main():
    params = golden_model()
    save_checkpoint(HERE / "model.caep", params)
    image = golden_image()
    (HERE / "image.ppm").write_bytes(encode_netpbm(image))
    for name, bpp in RATES.items():
        rate = RateTarget() if bpp is None else RateTarget.from_bpp(bpp, WIDTH, HEIGHT)
        data = encode_image(image, params, rate).to_bytes()
        (HERE / f"{name}.cae").write_bytes(data)
        (HERE / f"{name}.ppm").write_bytes(encode_netpbm(decode_image(data, params)))


if __name__ == "__main__":
    main()
