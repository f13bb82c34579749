"""
Shared directories and block sizes
==================================

"""

import tempfile

from mtcd import bench

target = tempfile.gettempdir()

# 32 processes each create 10 files, in one directory or one each
for layout in ("single_dir", "many_dirs"):
    r = bench.bench_fsops("create_file", 32, layout, target, ops_per_worker=10)
    print(layout, "mean %.3f ms" % r.aggregates["mean"])

# reading is cheaper than reading and writing back
for mode in ("read", "read_write"):
    r = bench.bench_readwrite(10_000_000, 4, mode, target)
    print(mode, "%.0f MB/s" % r.derived["aggregate_mb_per_s"])

# tiny blocks cost one syscall each
for block in (512, 128 << 10):
    r = bench.bench_readwrite(10_000_000, 1, "read", target, block_bytes=block)
    print(block, "B blocks: %.0f MB/s" % r.derived["aggregate_mb_per_s"])
