import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from PIL import Image, ImageDraw

from pano_epipolar.core.geometry import GridSpec, PixelCoord


class Plotter:
    def __init__(self, output_dir: str = "./plots", curve_color: tuple = (255, 0, 0),
                 marker_color: tuple = (0, 255, 0), marker_size: int = 3):
        self.output_dir = output_dir
        self.curve_color = tuple(curve_color)
        self.marker_color = tuple(marker_color)
        self.marker_size = int(marker_size)
        os.makedirs(self.output_dir, exist_ok=True)

    def draw_epicurve(self, image: np.ndarray, samples: PixelCoord, query: PixelCoord | None = None) -> np.ndarray:
        """Mark every curve sample (and optionally the query pixel) on a copy of the panorama."""
        height, width = image.shape[:2]
        grid = GridSpec(width, height)
        canvas = Image.fromarray(image, "RGB")
        draw = ImageDraw.Draw(canvas)
        flat = np.unique(np.atleast_1d(samples.flat_index(grid)))
        draw.point([(int(i % width), int(i // width)) for i in flat], fill=self.curve_color)
        if query is not None:
            row, col = divmod(int(query.flat_index(grid)), width)
            s = self.marker_size
            draw.line([(col - s, row), (col + s, row)], fill=self.marker_color)
            draw.line([(col, row - s), (col, row + s)], fill=self.marker_color)
        return np.asarray(canvas, dtype=np.uint8).copy()

    def plot_k_sweep(self, sweep: pd.DataFrame, reference_k: int, filename: str = "k_sweep.png") -> str:
        plt.figure(figsize=(8, 5))
        plt.plot(sweep["k"], sweep["mean_jaccard"], marker="o")
        plt.axhline(0.95, color="gray", linestyle="--", linewidth=1)
        plt.title(f"Mask agreement with K={reference_k}")
        plt.ylabel("Mean Jaccard")
        plt.xlabel("K (curve samples)")
        plt.ylim(0, 1.02)
        plt.tight_layout()
        path = os.path.join(self.output_dir, filename)
        plt.savefig(path)
        plt.close()
        return path

    def plot_mask_density(self, densities: pd.DataFrame, filename: str = "mask_density.png") -> str:
        plt.figure(figsize=(8, 5))
        plt.bar(densities["query_frame"].astype(str), densities["density"])
        plt.title("Epipolar mask bit density per query frame")
        plt.ylabel("Density")
        plt.xlabel("Query frame")
        plt.tight_layout()
        path = os.path.join(self.output_dir, filename)
        plt.savefig(path)
        plt.close()
        return path
