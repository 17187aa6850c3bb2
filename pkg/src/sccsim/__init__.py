"""sccsim: desk-scale simulator and training library for a rate-limited
closed-loop sensing-communication-control system.

Core pieces: a tape-based autodiff engine (`autodiff`, `nn`), the linear
plant and sensor world (`plant`), Kalman estimation (`estimator`), LQR
control (`controller`), per-sensor semantic compression at three goal
levels (`codec`), learned bit allocation under a long-term budget
(`rate_policy`), the slot-loop engine tying them together (`loop`), and the
experiment harness with CLI (`harness`).
"""

__version__ = "0.1.0"
