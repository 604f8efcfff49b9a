from concurrent.futures import Future, ProcessPoolExecutor
import logging

log = logging.getLogger(__name__)


class SerialExecutor:
    """In-process stand-in with the ``concurrent.futures`` executor interface."""

    def submit(self, fn, *args, **kwargs):
        future = Future()
        try:
            future.set_result(fn(*args, **kwargs))
        except Exception as err:  # noqa: BLE001 - delivered through the future
            future.set_exception(err)
        return future

    def shutdown(self, wait=True):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def get_executor(kind="local", n_workers=4):
    if kind == "serial" or n_workers <= 1:
        return SerialExecutor()

    elif kind == "local":
        return ProcessPoolExecutor(max_workers=n_workers)

    elif kind == "dask":
        from dask.distributed import Client

        client = Client(n_workers=n_workers, threads_per_worker=1)
        log.info(f"dask dashboard: {client.dashboard_link}")
        return client.get_executor()

    else:
        raise NotImplementedError(f"unknown executor: {kind}")
