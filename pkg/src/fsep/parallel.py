import os
from concurrent.futures import ThreadPoolExecutor


def thread_count() -> int:
    """Worker cap from ``FSEP_THREADS``; 0 (the default) means run sequentially."""
    raw = os.environ.get("FSEP_THREADS", "0").strip() or "0"
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


def ordered_map(fn, items):
    """map() that may fan out over threads but always returns results in input order."""
    items = list(items)
    n = thread_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
