import math
import numpy as np


class GaussianPulse:
    """Gaussian-modulated cosine g(t) = exp(-t^2 / (2 sigma^2)) * cos(2 pi f0 t), unit amplitude."""

    def __init__(self, center_freq_hz: float, sigma_s: float):
        if center_freq_hz <= 0.0 or sigma_s <= 0.0:
            raise ValueError("pulse center frequency and sigma must be positive")
        self.center_freq_hz = float(center_freq_hz)
        self.sigma_s = float(sigma_s)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return np.exp(-0.5 * (t / self.sigma_s) ** 2) * np.cos(2.0 * math.pi * self.center_freq_hz * t)

    def support_s(self, n_sigma: float = 6.0) -> float:
        """Half-width beyond which the envelope is below exp(-n_sigma^2 / 2)."""
        return n_sigma * self.sigma_s

    def sample_delayed(self, num_samples: int, fs_hz: float, delays_s: np.ndarray) -> np.ndarray:
        """Sample g(i/fs - delay) for i in [0, num_samples) and every delay; shape (num_samples, *delays.shape)."""
        t = np.arange(int(num_samples), dtype=np.float64) / float(fs_hz)
        d = np.asarray(delays_s, dtype=np.float64)
        return self(t.reshape((-1,) + (1,) * d.ndim) - d[np.newaxis, ...])
