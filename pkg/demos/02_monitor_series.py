"""
Watching a logprob series for silent updates
============================================

An hourly probe series is simulated with a model update at hour 3000. The
offline scan and the streaming detector flag the same hour, and the series
survives a round trip through the on-disk store.
"""

import tempfile

from lptrack.monitor import DetectorConfig, OnlineDetector, detect_changes, window_statistics
from lptrack.simulator import SyntheticModel, simulated_series
from lptrack.store import SeriesRecord, SeriesStore

model = SyntheticModel.random(seed=3)
points = simulated_series(model, 5000, changes=[(3000, ("logit-shift", 6.0))], seed=1)

# statistic between the 24 points before and after each boundary
stats = window_statistics(points, 24)
print(f"window statistic: median {sorted(stats)[len(stats) // 2]:.3f}, max {stats.max():.3f}")

for event in detect_changes(points):
    print(f"offline: change at index {event.index} ({event.timestamp:%Y-%m-%d %H:%M}), statistic {event.statistic:.2f}")

detector = OnlineDetector(DetectorConfig(), "sim", "x")
for i, point in enumerate(points):
    for event in detector.feed(point):
        print(f"online: change at index {event.index}, reported after point {i}")

with tempfile.TemporaryDirectory() as root:
    store = SeriesStore(root)
    for point in points:
        store.append(SeriesRecord.from_point(point))
    reloaded = SeriesStore(root).read_series("sim", "x")
    print(f"store round trip: {len(reloaded)} points, identical={reloaded == points}")
