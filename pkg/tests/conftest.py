import numpy as np
import pytest

from zoomcot.imaging import full_view


@pytest.fixture
def checker_image():
    def make(w=96, h=64):
        yy, xx = np.mgrid[0:h, 0:w]
        arr = np.stack(
            [
                ((xx // 8 + yy // 8) % 2 * 200 + 30).astype(np.uint8),
                (xx * 255 // max(w - 1, 1)).astype(np.uint8),
                (yy * 255 // max(h - 1, 1)).astype(np.uint8),
            ],
            axis=-1,
        )
        return full_view(arr)

    return make
