"""Deterministic in-process multi-rank transport.

Each simulated rank runs its program in its own thread and talks to the
others only through the five collectives the algorithm needs. Collective
calls rendezvous on a global slot counter: every live rank must arrive at
slot k with the same collective kind before any of them proceeds, which
makes mismatched schedules and stalled ranks detectable instead of
hanging. Results are assembled in rank order from the gathered payloads,
so received buffers (and all count/byte statistics) are a pure function
of the inputs: two runs with the same seed and programs are bit-identical
regardless of thread scheduling. Wall times are the only nondeterministic
output and are reported separately from the deterministic statistics.

A real message-passing backend can replace :class:`RankComm` by providing
the same five methods; the algorithm modules only ever see this interface.
The active backend is selected by the ``FMM_BACKEND`` environment variable
("sim" is the only backend shipped here).
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np

COLLECTIVE_KINDS = ("allgatherv", "alltoallv", "gatherv", "scatterv", "neighbor_alltoallv")

_WAIT_TIMEOUT = float(os.environ.get("FMM_COLLECTIVE_TIMEOUT", "300"))


class TransportError(RuntimeError):
    """Base class for simulated transport failures."""


class CollectiveMismatchError(TransportError):
    """Ranks disagreed on which collective the current slot is."""


class StalledCollectiveError(TransportError):
    """A collective can never complete because some rank left the program."""


def transport_backend():
    backend = os.environ.get("FMM_BACKEND", "sim")
    if backend != "sim":
        raise ValueError(f"unknown transport backend {backend!r} (available: sim)")
    return backend


@dataclass
class CollectiveStats:
    calls: int = 0
    msgs_sent: int = 0
    bytes_sent: int = 0
    bytes_recv: int = 0
    payload_bytes: int = 0
    seconds: float = 0.0

    def deterministic_fields(self):
        return {
            "calls": self.calls,
            "msgs_sent": self.msgs_sent,
            "bytes_sent": self.bytes_sent,
            "bytes_recv": self.bytes_recv,
            "payload_bytes": self.payload_bytes,
        }


class RankStats:
    """Per-rank, per-collective instrumentation."""

    def __init__(self):
        self.by_kind = {kind: CollectiveStats() for kind in COLLECTIVE_KINDS}

    def snapshot(self):
        """Deterministic counters only (no wall times)."""
        return {k: s.deterministic_fields() for k, s in self.by_kind.items()}

    def seconds_by_kind(self):
        return {k: s.seconds for k, s in self.by_kind.items()}


def stats_delta(before, after):
    """Field-wise difference of two :meth:`RankStats.snapshot` results."""
    return {
        kind: {f: after[kind][f] - before[kind][f] for f in after[kind]}
        for kind in after
    }


class _Slot:
    __slots__ = ("kind", "payloads", "results", "done", "picked")

    def __init__(self, kind):
        self.kind = kind
        self.payloads = {}
        self.results = None
        self.done = False
        self.picked = 0


def _nbytes(arr):
    return 0 if arr is None else arr.nbytes


def _recv(arr):
    """Deliver a private copy, like a real wire transfer would."""
    return np.array(arr, copy=True)


class SimWorld:
    """Shared state of one simulated communicator."""

    def __init__(self, size, seed=0):
        if size < 1:
            raise ValueError(f"world size must be >= 1, got {size}")
        self.size = size
        self.seed = seed
        self._cond = threading.Condition()
        self._slots = {}
        self._finished = set()
        self._failure = None
        self.stats = [RankStats() for _ in range(size)]

    def comm(self, rank):
        if not 0 <= rank < self.size:
            raise ValueError(f"rank {rank} out of range for world of size {self.size}")
        return RankComm(self, rank)

    def comms(self):
        return [RankComm(self, r) for r in range(self.size)]

    def abort(self, exc):
        with self._cond:
            if self._failure is None:
                self._failure = exc
            self._cond.notify_all()

    def mark_finished(self, rank):
        with self._cond:
            self._finished.add(rank)
            for slot in self._slots.values():
                if not slot.done and slot.payloads and rank not in slot.payloads:
                    self._failure = self._failure or StalledCollectiveError(
                        f"{slot.kind} stalled: rank {rank} finished without joining "
                        f"(arrived: {sorted(slot.payloads)})"
                    )
            self._cond.notify_all()

    def deterministic_stats(self):
        return [s.snapshot() for s in self.stats]

    def check_conservation(self):
        """Global bytes sent must equal global bytes received, per kind."""
        for kind in COLLECTIVE_KINDS:
            sent = sum(s.by_kind[kind].bytes_sent for s in self.stats)
            recv = sum(s.by_kind[kind].bytes_recv for s in self.stats)
            if sent != recv:
                raise AssertionError(f"stats conservation violated for {kind}: {sent} != {recv}")
        return True

    # -- rendezvous core ----------------------------------------------------

    def _fail(self, exc):
        self._failure = self._failure or exc
        self._cond.notify_all()
        raise self._failure

    def _raise_failure(self, kind):
        if isinstance(self._failure, TransportError):
            raise type(self._failure)(str(self._failure)) from self._failure
        raise TransportError(f"{kind} aborted by rank failure") from self._failure

    def _rendezvous(self, rank, slot_idx, kind, payload):
        t0 = time.perf_counter()
        with self._cond:
            if self._failure is not None:
                self._raise_failure(kind)
            slot = self._slots.get(slot_idx)
            if slot is None:
                slot = self._slots[slot_idx] = _Slot(kind)
            if slot.kind != kind:
                self._fail(CollectiveMismatchError(
                    f"collective mismatch at slot {slot_idx}: rank {rank} called "
                    f"{kind} while others called {slot.kind}"
                ))
            missing = self._finished - set(slot.payloads) - {rank}
            if missing:
                self._fail(StalledCollectiveError(
                    f"{kind} stalled: ranks {sorted(missing)} already finished"
                ))
            slot.payloads[rank] = payload
            if len(slot.payloads) == self.size:
                try:
                    slot.results = _COMPLETERS[kind](self, slot.payloads)
                except TransportError as exc:
                    self._fail(exc)
                except Exception as exc:
                    self._fail(TransportError(f"{kind} failed: {exc}"))
                slot.done = True
                self._cond.notify_all()
            else:
                deadline = time.perf_counter() + _WAIT_TIMEOUT
                while not slot.done and self._failure is None:
                    if not self._cond.wait(timeout=1.0) and time.perf_counter() > deadline:
                        self._fail(StalledCollectiveError(
                            f"{kind} timed out at slot {slot_idx}: arrived "
                            f"{sorted(slot.payloads)} of {self.size}"
                        ))
            if self._failure is not None:
                self._raise_failure(kind)
            result = slot.results[rank]
            slot.picked += 1
            if slot.picked == self.size:
                slot.payloads.clear()
                slot.results = None
                del self._slots[slot_idx]
            self.stats[rank].by_kind[kind].seconds += time.perf_counter() - t0
            return result

    # -- completion rules (run once per slot, under the lock) ---------------

    def _complete_allgatherv(self, payloads):
        arrays = [payloads[r] for r in range(self.size)]
        for r in range(self.size):
            st = self.stats[r].by_kind["allgatherv"]
            st.calls += 1
            nb = _nbytes(arrays[r])
            st.payload_bytes += nb
            if nb:
                st.msgs_sent += self.size - 1
                st.bytes_sent += nb * (self.size - 1)
            st.bytes_recv += sum(_nbytes(arrays[i]) for i in range(self.size) if i != r)
        return {r: [_recv(a) for a in arrays] for r in range(self.size)}

    def _complete_alltoallv(self, payloads):
        for r, send in payloads.items():
            if len(send) != self.size:
                raise TransportError(
                    f"alltoallv: rank {r} passed {len(send)} buffers for world size {self.size}"
                )
        for r in range(self.size):
            st = self.stats[r].by_kind["alltoallv"]
            st.calls += 1
            for j in range(self.size):
                nb = _nbytes(payloads[r][j])
                if j != r and nb:
                    st.msgs_sent += 1
                    st.bytes_sent += nb
                    self.stats[j].by_kind["alltoallv"].bytes_recv += nb
            st.payload_bytes += sum(_nbytes(b) for j, b in enumerate(payloads[r]) if j != r)
        return {r: [_recv(payloads[i][r]) for i in range(self.size)] for r in range(self.size)}

    def _complete_gatherv(self, payloads):
        roots = {payloads[r][0] for r in payloads}
        if len(roots) != 1:
            raise TransportError(f"gatherv: ranks disagree on root ({sorted(roots)})")
        root = roots.pop()
        arrays = [payloads[r][1] for r in range(self.size)]
        for r in range(self.size):
            st = self.stats[r].by_kind["gatherv"]
            st.calls += 1
            nb = _nbytes(arrays[r])
            st.payload_bytes += nb
            if r != root and nb:
                st.msgs_sent += 1
                st.bytes_sent += nb
                self.stats[root].by_kind["gatherv"].bytes_recv += nb
        out = {r: None for r in range(self.size)}
        out[root] = [_recv(a) for a in arrays]
        return out

    def _complete_scatterv(self, payloads):
        roots = {payloads[r][0] for r in payloads}
        if len(roots) != 1:
            raise TransportError(f"scatterv: ranks disagree on root ({sorted(roots)})")
        root = roots.pop()
        segments = payloads[root][1]
        if segments is None or len(segments) != self.size:
            raise TransportError(
                f"scatterv: root must pass exactly {self.size} segments"
            )
        st_root = self.stats[root].by_kind["scatterv"]
        for r in range(self.size):
            st = self.stats[r].by_kind["scatterv"]
            st.calls += 1
            nb = _nbytes(segments[r])
            st.payload_bytes += nb
            if r != root and nb:
                st_root.msgs_sent += 1
                st_root.bytes_sent += nb
                st.bytes_recv += nb
        return {r: _recv(segments[r]) for r in range(self.size)}

    def _complete_neighbor_alltoallv(self, payloads):
        graphs = {r: tuple(payloads[r][0]) for r in payloads}
        sends = {r: payloads[r][1] for r in payloads}
        for r, nbrs in graphs.items():
            if len(sends[r]) != len(nbrs):
                raise TransportError(
                    f"neighbor_alltoallv: rank {r} passed {len(sends[r])} buffers "
                    f"for {len(nbrs)} neighbors"
                )
            if r in nbrs:
                raise TransportError(f"neighbor_alltoallv: rank {r} lists itself")
            for j in nbrs:
                if not 0 <= j < self.size:
                    raise TransportError(f"neighbor_alltoallv: rank {r} lists unknown rank {j}")
                if r not in graphs[j]:
                    raise TransportError(
                        f"neighbor_alltoallv: asymmetric graph, {r} lists {j} "
                        f"but {j} does not list {r}"
                    )
        results = {}
        for r, nbrs in graphs.items():
            st = self.stats[r].by_kind["neighbor_alltoallv"]
            st.calls += 1
            recv = []
            for pos, j in enumerate(nbrs):
                nb = _nbytes(sends[r][pos])
                if nb:
                    st.msgs_sent += 1
                    st.bytes_sent += nb
                    st.payload_bytes += nb
                # What j addressed to r travels the (j, r) edge only.
                back = sends[j][graphs[j].index(r)]
                recv.append(_recv(back))
                self.stats[r].by_kind["neighbor_alltoallv"].bytes_recv += _nbytes(back)
            results[r] = recv
        return results


_COMPLETERS = {
    "allgatherv": SimWorld._complete_allgatherv,
    "alltoallv": SimWorld._complete_alltoallv,
    "gatherv": SimWorld._complete_gatherv,
    "scatterv": SimWorld._complete_scatterv,
    "neighbor_alltoallv": SimWorld._complete_neighbor_alltoallv,
}


class RankComm:
    """One rank's handle on the world; confined to a single thread."""

    def __init__(self, world, rank):
        self.world = world
        self.rank = rank
        self.size = world.size
        self._calls = 0

    def _next_slot(self):
        idx = self._calls
        self._calls += 1
        return idx

    def allgatherv(self, array):
        """Every rank receives the rank-ordered list of all contributions."""
        return self.world._rendezvous(
            self.rank, self._next_slot(), "allgatherv", np.asarray(array)
        )

    def alltoallv(self, send_list):
        """Full exchange: ``send_list[j]`` goes to rank j; returns buffers
        received from every rank, in rank order."""
        payload = [np.asarray(b) for b in send_list]
        return self.world._rendezvous(self.rank, self._next_slot(), "alltoallv", payload)

    def gatherv(self, array, root=0):
        """Root receives the rank-ordered list of contributions; others None."""
        return self.world._rendezvous(
            self.rank, self._next_slot(), "gatherv", (root, np.asarray(array))
        )

    def scatterv(self, segments=None, root=0):
        """Root distributes ``segments[j]`` to rank j; returns own segment."""
        payload = (root, None if segments is None else [np.asarray(s) for s in segments])
        return self.world._rendezvous(self.rank, self._next_slot(), "scatterv", payload)

    def neighbor_alltoallv(self, neighbors, send_list):
        """Sparse exchange along a symmetric rank graph.

        ``neighbors`` is this rank's sorted neighbor list; ``send_list`` is
        aligned with it. Returns received buffers in the same alignment.
        Zero bytes ever move between ranks that do not list each other.
        """
        nbrs = tuple(int(n) for n in neighbors)
        payload = (nbrs, [np.asarray(b) for b in send_list])
        return self.world._rendezvous(
            self.rank, self._next_slot(), "neighbor_alltoallv", payload
        )

    def stats(self):
        return self.world.stats[self.rank]


def create_world(size, seed=0):
    """P simulated rank handles sharing one deterministic world."""
    return SimWorld(size, seed)


def run_spmd(world, fn, args_per_rank=None):
    """Run ``fn(comm, *args)`` on every rank in its own thread.

    Returns the per-rank results in rank order; the first rank failure
    aborts all collectives and is re-raised here.
    """
    results = [None] * world.size
    errors = {}

    def runner(rank):
        comm = world.comm(rank)
        try:
            args = args_per_rank[rank] if args_per_rank is not None else ()
            results[rank] = fn(comm, *args)
        except BaseException as exc:  # noqa: BLE001 - must abort peers
            errors[rank] = exc
            world.abort(exc)
        finally:
            world.mark_finished(rank)

    threads = [
        threading.Thread(target=runner, args=(r,), name=f"fmm-rank-{r}")
        for r in range(world.size)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if world._failure is not None:
        raise world._failure
    if errors:
        raise errors[min(errors)]
    return results
