import math
import os
import shutil
import tempfile
import unittest

import pandas as pd

from layoutfusion.benchmarks import *
from layoutfusion.util import read_json


class TestWithin(unittest.TestCase):

    def test_within(self):
        self.assertTrue(within({'scale': 0.01, 'angle': 0.5, 'origin': 0.01}))
        self.assertFalse(within({'scale': 0.01, 'angle': 1.5, 'origin': 0.01}))
        self.assertFalse(within({'scale': math.inf, 'angle': math.inf, 'origin': math.inf}))
        self.assertTrue(within({'scale': 0.1}, {'scale': 0.2}))


class TestSummarize(unittest.TestCase):

    def test_budget(self):
        results = pd.DataFrame([{'seed': 0, 'strategy': 'tracked', 'success': True},
                                {'seed': 0, 'strategy': 'baseline', 'success': False},
                                {'seed': 1, 'strategy': 'tracked', 'success': True},
                                {'seed': 1, 'strategy': 'baseline', 'success': True}])
        self.assertEqual(summarize(results, 'budget'), {'runs': 2, 'successes': {'baseline': 1, 'tracked': 2}})

    def test_corridor(self):
        results = pd.DataFrame({'seed': [0, 1, 2], 'lidar_rmse': [0.2, 0.3, 0.4], 'fused_rmse': [0.1, 0.1, 0.3],
                                'reduction': [0.5, 2 / 3, 0.25]})
        summary = summarize(results, 'corridor')
        self.assertEqual(summary['runs'], 3)
        self.assertAlmostEqual(summary['median_lidar_rmse'], 0.3)
        self.assertAlmostEqual(summary['median_reduction'], 0.5)


class TestSweeps(unittest.TestCase):

    parameters = {'simulation': {'noise_free': True}}

    def test_budget_sweep(self):
        results = budget_sweep([0], frames=30, parameters=self.parameters)
        self.assertEqual(list(results.columns), ['seed', 'strategy', 'scale', 'angle', 'origin', 'success'])
        self.assertEqual(sorted(results['strategy']), ['baseline', 'tracked'])
        tracked = results[results['strategy'] == 'tracked'].iloc[0]
        self.assertTrue(tracked['success'])

    def test_corridor_sweep(self):
        results = corridor_sweep([0], frames=12, parameters=self.parameters)
        self.assertEqual(list(results.columns), ['seed', 'lidar_rmse', 'fused_rmse', 'reduction'])
        self.assertEqual(len(results), 1)
        self.assertEqual(list(results['seed']), [0])


class TestMain(unittest.TestCase):

    def setUp(self):
        self.tempdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tempdir)

    def test_budget(self):
        config = os.path.join(self.tempdir, 'config.yaml')
        with open(config, 'w', encoding='utf8') as fobj:
            fobj.write('common:\n  parameters:\n    simulation:\n      noise_free: true\n')
        summary = os.path.join(self.tempdir, 'summary.json')
        csv = os.path.join(self.tempdir, 'results.csv')
        code = main(['budget', '--seeds', '1', '--frames', '20', '--config', config, '--summary', summary,
                     '--csv', csv])
        self.assertEqual(code, 0)
        self.assertEqual(read_json(summary)['runs'], 1)
        self.assertEqual(len(pd.read_csv(csv)), 2)


class TestDefaultNoise(unittest.TestCase):

    def test_budget_sweep(self):
        results = budget_sweep(range(5), frames=40)
        successes = summarize(results, 'budget')['successes']
        self.assertGreaterEqual(successes.get('tracked', 0), 4)
        self.assertLessEqual(successes.get('baseline', 0), 2)

    def test_corridor_sweep(self):
        results = corridor_sweep(range(5))
        self.assertEqual(len(results), 5)
        self.assertGreaterEqual(summarize(results, 'corridor')['median_reduction'], 0.3)

    def test_tau_sweep(self):
        results = tau_sweep(range(2), frames=40)
        self.assertEqual(list(results.columns), ['seed', 'tau'])
        self.assertTrue((results['tau'] > 0).all())
        summary = summarize(results, 'tau')
        self.assertEqual(summary['runs'], 2)
        self.assertAlmostEqual(summary['median_tau'], float(results['tau'].median()))
