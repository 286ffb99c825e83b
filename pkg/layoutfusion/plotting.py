"""SVG drawings of floor plans and trajectories"""

import logging

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402  pylint: disable=C0413

from .util import file_open  # noqa: E402  pylint: disable=C0413


logger = logging.getLogger(__name__)

HASH_SALT = 'layoutfusion'


def plot_plan(plan, trajectory=None, truth=None, polygons=None, title=None):
    """Return a matplotlib figure of a floor plan

    Walls are drawn in black with corners as dots, the optional
    ground-truth plan in grey under them, enclosed floor polygons
    shaded and the trajectory as a line with its start marked.

    """
    fig, ax = plt.subplots(1, 1, figsize=(8, 8))
    for polygon in polygons or []:
        xs, ys = polygon.exterior.xy
        ax.fill(xs, ys, color='tab:blue', alpha=0.15, linewidth=0)
    if truth is not None:
        for wall in truth.walls:
            ax.plot([wall.start[0], wall.end[0]], [wall.start[1], wall.end[1]], color='0.7', linewidth=4)
    for wall in plan.walls:
        ax.plot([wall.start[0], wall.end[0]], [wall.start[1], wall.end[1]], color='black', linewidth=1.5)
    if len(plan.corners):
        ax.plot(plan.corners[:, 0], plan.corners[:, 1], 'o', color='tab:red', markersize=4)
    if trajectory is not None and len(trajectory):
        positions = trajectory.as_array()
        ax.plot(positions[:, 0], positions[:, 1], color='tab:green', linewidth=1)
        ax.plot(positions[:1, 0], positions[:1, 1], '^', color='tab:green')
    ax.set_aspect('equal')
    ax.set_xlabel('x (m)')
    ax.set_ylabel('y (m)')
    if title:
        ax.set_title(title)
    return fig


def save_svg(fig, filename):
    """Write a figure as SVG with reproducible bytes"""
    with matplotlib.rc_context({'svg.hashsalt': HASH_SALT}):
        with file_open(filename, 'w') as fobj:
            fig.savefig(fobj, format='svg', metadata={'Date': None})
    plt.close(fig)
    logger.info("wrote %s", filename)


def write_plan_svg(filename, plan, trajectory=None, truth=None, polygons=None, title=None):
    save_svg(plot_plan(plan, trajectory, truth, polygons, title), filename)
