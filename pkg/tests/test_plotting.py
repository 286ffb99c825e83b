import os
import shutil
import tempfile
import unittest

from layoutfusion.features import LineSegment2
from layoutfusion.geometry import Pose2
from layoutfusion.mapping import FloorPlan, Trajectory
from layoutfusion.plotting import *


class TestPlanSvg(unittest.TestCase):

    def setUp(self):
        self.tempdir = tempfile.mkdtemp()
        walls = [LineSegment2([0, 0], [4, 0]), LineSegment2([4, 0], [4, 3]), LineSegment2([4, 3], [0, 3]),
                 LineSegment2([0, 3], [0, 0])]
        self.plan = FloorPlan(walls, [[0, 0], [4, 0], [4, 3], [0, 3]])
        self.trajectory = Trajectory([Pose2(1, 1, 0), Pose2(2, 1, 0.1), Pose2(3, 1.5, 0.3)])

    def tearDown(self):
        shutil.rmtree(self.tempdir)

    def test_write(self):
        fname = os.path.join(self.tempdir, 'plots', 'plan.svg')
        write_plan_svg(fname, self.plan, self.trajectory, truth=self.plan, polygons=self.plan.to_polygons(),
                       title='plan')
        with open(fname, 'r', encoding='utf8') as fobj:
            content = fobj.read()
        self.assertIn('<svg', content)

    def test_reproducible(self):
        first, second = os.path.join(self.tempdir, 'a.svg'), os.path.join(self.tempdir, 'b.svg')
        for fname in (first, second):
            write_plan_svg(fname, self.plan, self.trajectory, polygons=self.plan.to_polygons())
        with open(first, 'rb') as fobj1, open(second, 'rb') as fobj2:
            self.assertEqual(fobj1.read(), fobj2.read())

    def test_empty_plan(self):
        fname = os.path.join(self.tempdir, 'empty.svg')
        write_plan_svg(fname, FloorPlan())
        self.assertTrue(os.path.isfile(fname))
