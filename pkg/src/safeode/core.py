"""Kernel dispatch: compiled ``_core`` when built, else ``_pycore``.

Set ``SAFEODE_PURE=1`` to force the pure-Python kernels.
"""

import os

from . import _pycore

if os.environ.get("SAFEODE_PURE") == "1":
    _impl = _pycore
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = _pycore

BACKEND = "compiled" if _impl is not _pycore else "python"

QP_OK = _pycore.QP_OK
QP_INFEASIBLE = _pycore.QP_INFEASIBLE
QP_MAXITER = _pycore.QP_MAXITER
QP_DEGENERATE = _pycore.QP_DEGENERATE

qp_solve = _impl.qp_solve
qp_solve_batch = _impl.qp_solve_batch
qp_backward = _impl.qp_backward
qp_backward_batch = _impl.qp_backward_batch
bicycle_row = _impl.bicycle_row
bicycle_row_batch = _impl.bicycle_row_batch
barrier_values = _impl.barrier_values
lidar_scan = _impl.lidar_scan
shoot_rollout = _impl.shoot_rollout
shoot_cost_grad = _impl.shoot_cost_grad
