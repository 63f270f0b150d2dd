import threading
import time

from django.core.cache import cache
from django.test import SimpleTestCase

from elastography.jobs import run_parallel
from elastography.services.performance_monitor import get_performance_stats, monitor_performance


class RunParallelTests(SimpleTestCase):
    def test_results_keep_input_order(self):
        def slow_square(n):
            time.sleep(0.002 * (10 - n))
            return n * n

        self.assertEqual(run_parallel(slow_square, range(10), workers=4), [n * n for n in range(10)])

    def test_uses_worker_threads(self):
        seen = set()

        def record(_):
            seen.add(threading.current_thread().name)
            time.sleep(0.01)

        run_parallel(record, range(8), workers=4)
        self.assertTrue(all(name.startswith("elastolab") for name in seen))

    def test_serial_when_single_worker(self):
        self.assertEqual(run_parallel(str, [1, 2], workers=1), ["1", "2"])
        self.assertEqual(run_parallel(str, []), [])

    def test_failure_is_logged_and_raised(self):
        def explode(n):
            if n == 3:
                raise ValueError("bad case")
            return n

        with self.assertLogs("elastography.jobs", level="ERROR") as logs, self.assertRaises(ValueError):
            run_parallel(explode, range(5), workers=2)
        self.assertIn("Job 3 failed: bad case", logs.output[0])


class PerformanceMonitorTests(SimpleTestCase):
    def setUp(self):
        cache.clear()

    def tearDown(self):
        cache.clear()

    def test_records_latest_timing(self):
        @monitor_performance("unit_stage")
        def stage(x):
            return x + 1

        self.assertEqual(stage(1), 2)
        stats = get_performance_stats()
        self.assertEqual(list(stats), ["perf_unit_stage"])
        self.assertTrue(stats["perf_unit_stage"].endswith("s"))

    def test_failure_records_nothing(self):
        @monitor_performance()
        def broken():
            raise RuntimeError("no")

        with self.assertRaises(RuntimeError):
            broken()
        self.assertEqual(get_performance_stats(), {})

    def test_concurrent_stages_all_indexed(self):
        stages = [monitor_performance(f"stage_{i:02d}")(lambda: time.sleep(0.001)) for i in range(40)]
        barrier = threading.Barrier(8, timeout=10)

        def run(i):
            if i < 8:
                barrier.wait()
            stages[i]()

        run_parallel(run, range(40), workers=8)
        self.assertEqual(sorted(get_performance_stats()), [f"perf_stage_{i:02d}" for i in range(40)])
