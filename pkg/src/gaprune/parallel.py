"""Parallel grow-and-prune (P-GaP) with a coordinator and message-passing workers.

Every step the coordinator sends identical copies of the sparse model and
masks to the workers.  The worker for partition ``i`` grows that partition,
trains, and returns only the weights of the layers it owns.  The coordinator
stitches the returned partitions into a dense model and magnitude-prunes it.

Workers run as threads and talk to the coordinator only through queues.  With
``wire=True`` every message is encoded to PGAP bytes and decoded on receipt.
"""

from __future__ import annotations

import queue
import struct
import threading
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import decode_block, encode_block, model_from_tensors
from .cyclic import GaPConfig, init_sparse, partition_for
from .data import Dataset
from .errors import FormatError, GaPError, ProtocolError, StepAbort
from .nn import MLP
from .partition import PartitionScheme
from .sparsity import arg_grow_to, arg_prune_to, mask_relative_error, prunable_layers
from .training import RunRecord, StepHook, Trainer, rng_for, write_weights

WIRE_MAGIC = b"PGAP"
WIRE_VERSION = 1
MSG_DISTRIBUTE, MSG_RESULT, MSG_SHUTDOWN = 1, 2, 3
_HEADER = struct.Struct("<4sHB")


@dataclass
class Distribute:
    step: int
    seed: int
    partition: int
    params: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]


@dataclass
class Result:
    step: int
    partition: int
    params: dict[str, np.ndarray]


@dataclass
class Shutdown:
    pass


@dataclass
class _Failure:
    # in-process only: a worker crashed
    partition: int
    error: str


def encode_message(msg) -> bytes:
    if isinstance(msg, Distribute):
        head = _HEADER.pack(WIRE_MAGIC, WIRE_VERSION, MSG_DISTRIBUTE)
        return head + struct.pack("<IQH", msg.step, msg.seed, msg.partition) + encode_block(msg.params, msg.masks)
    if isinstance(msg, Result):
        head = _HEADER.pack(WIRE_MAGIC, WIRE_VERSION, MSG_RESULT)
        return head + struct.pack("<IH", msg.step, msg.partition) + encode_block(msg.params, {})
    if isinstance(msg, Shutdown):
        return _HEADER.pack(WIRE_MAGIC, WIRE_VERSION, MSG_SHUTDOWN)
    raise ProtocolError(f"cannot encode {type(msg).__name__}")


def decode_message(buf: bytes):
    if len(buf) < _HEADER.size:
        raise FormatError("truncated PGAP header")
    magic, version, kind = _HEADER.unpack_from(buf)
    if magic != WIRE_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise FormatError(f"unsupported PGAP version {version}")
    pos = _HEADER.size
    try:
        if kind == MSG_DISTRIBUTE:
            step, seed, part = struct.unpack_from("<IQH", buf, pos)
            tensors, masks, end = decode_block(buf, pos + 14)
            msg = Distribute(step, seed, part, tensors, masks)
        elif kind == MSG_RESULT:
            step, part = struct.unpack_from("<IH", buf, pos)
            tensors, _, end = decode_block(buf, pos + 6)
            msg = Result(step, part, tensors)
        elif kind == MSG_SHUTDOWN:
            msg, end = Shutdown(), pos
        else:
            raise FormatError(f"unknown message type {kind}")
    except struct.error as exc:
        raise FormatError("truncated PGAP payload") from exc
    if end != len(buf):
        raise FormatError("trailing bytes in PGAP message")
    return msg


def worker_seed(master_seed: int, step: int, worker: int) -> int:
    """u64 data-shuffle seed for one worker at one step."""
    ss = np.random.SeedSequence([int(master_seed), zlib.crc32(b"worker"), step, worker])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(hi) << 32 | int(lo)


def owned_layers(model: MLP, scheme: PartitionScheme, partition: int) -> list[str]:
    """Layers whose parameters partition ``partition`` reports back.

    Layers outside every partition (exempt from pruning) go with partition 0.
    """
    grouped = set(scheme.layers)
    owned = set(scheme.groups[partition])
    if partition == 0:
        owned |= {lin.name for lin in model.linears() if lin.name not in grouped}
    return [lin.name for lin in model.linears() if lin.name in owned]


def combine(
    base: Mapping[str, np.ndarray],
    results: Sequence[Result],
    ownership: Mapping[str, int],
) -> dict[str, np.ndarray]:
    """Assemble a dense parameter set from one Result per partition.

    ``ownership`` maps each layer name to the partition that supplies its
    weight and bias.  The result does not depend on the order of ``results``.
    """
    by_part: dict[int, Result] = {}
    for res in results:
        if res.partition in by_part:
            raise ProtocolError(f"duplicate result for partition {res.partition}")
        by_part[res.partition] = res
    expected = set(ownership.values())
    if set(by_part) != expected:
        raise ProtocolError(f"results for partitions {sorted(by_part)}, expected {sorted(expected)}")
    out = {}
    for key, arr in base.items():
        layer = key.rsplit(".", 1)[0]
        res = by_part[ownership[layer]]
        if key not in res.params:
            raise ProtocolError(f"partition {res.partition} did not return {key}")
        if res.params[key].shape != arr.shape:
            raise ProtocolError(f"{key}: got shape {res.params[key].shape}, expected {arr.shape}")
        out[key] = res.params[key].copy()
    return out


class _OrderGate:
    """Forces workers to post their results in a fixed order each step."""

    def __init__(self, order: Sequence[int]):
        self.order = list(order)
        self.pos = 0
        self.cond = threading.Condition()

    def wait(self, partition: int):
        with self.cond:
            while self.order[self.pos] != partition:
                self.cond.wait()

    def done(self):
        with self.cond:
            self.pos = (self.pos + 1) % len(self.order)
            self.cond.notify_all()


def _worker_main(partitions, config: GaPConfig, dataset: Dataset, inbox, outbox, wire, gate):
    while True:
        msg = inbox.get()
        if wire:
            msg = decode_message(msg)
        if isinstance(msg, Shutdown):
            return
        try:
            if msg.partition not in partitions:
                raise ProtocolError(f"worker got partition {msg.partition}, owns {partitions}")
            model = model_from_tensors(msg.params)
            masks = {n: m.copy() for n, m in msg.masks.items()}
            scheme = partition_for(model, config, msg.step)
            grow = scheme.groups[msg.partition]
            masks.update(arg_grow_to({n: masks[n] for n in grow}))
            record = RunRecord(f"{config.run_id}/w{msg.partition}", "pgap-worker")
            trainer = Trainer(model, masks, dataset, config.opt, config.batch_size, np.random.default_rng(msg.seed), record)
            trainer.train(config.epochs_per_step, msg.step, msg.step)
            params = model.parameters()
            out = {}
            for name in owned_layers(model, scheme, msg.partition):
                out[f"{name}.weight"] = params[f"{name}.weight"].copy()
                out[f"{name}.bias"] = params[f"{name}.bias"].copy()
            reply = Result(msg.step, msg.partition, out)
            if wire:
                reply = encode_message(reply)
        except Exception as exc:  # surfaced to the coordinator as a step abort
            reply = _Failure(getattr(msg, "partition", -1), f"{type(exc).__name__}: {exc}")
        if gate is not None:
            gate.wait(msg.partition)
        outbox.put(reply)
        if gate is not None:
            gate.done()


@dataclass
class _Pool:
    inboxes: list
    outbox: queue.Queue
    threads: list = field(default_factory=list)
    sent: int = 0
    received: int = 0


def run_pgap(
    config: GaPConfig,
    model: MLP,
    dataset: Dataset,
    worker_count: int | None = None,
    timeout: float = 300.0,
    report_order: Sequence[int] | None = None,
    wire: bool = False,
    on_step: StepHook | None = None,
) -> tuple[MLP, dict[str, np.ndarray], RunRecord]:
    """Run P-GaP; returns ``(model, masks, record)``.

    ``worker_count`` defaults to kappa; with fewer workers, partition ``i`` is
    served by worker ``i % worker_count``.  ``report_order`` pins the order in
    which partitions post results (for determinism checks).  ``timeout`` is
    seconds to wait for each result.
    """
    kappa = config.kappa
    worker_count = kappa if worker_count is None else worker_count
    if not 1 <= worker_count <= kappa:
        raise ProtocolError(f"worker_count must be in [1, {kappa}]")
    if report_order is not None and sorted(report_order) != list(range(kappa)):
        raise ProtocolError("report_order must be a permutation of the partitions")
    if report_order is not None and worker_count != kappa:
        raise ProtocolError("report_order needs one worker per partition")

    model = model.copy()
    policy = config.policy
    record = RunRecord(config.run_id, "pgap")
    masks = init_sparse(model, policy, rng_for(config.seed, "init"))
    layers = prunable_layers(model, policy)
    scheme = partition_for(model, config, 0)
    trainer = Trainer(model, masks, dataset, config.opt, config.batch_size, rng_for(config.seed, "data"), record, groups=scheme.groups)
    record.coverage.update(masks)
    trainer.log("init", None, None)

    gate = _OrderGate(report_order) if report_order is not None else None
    pool = _Pool([queue.Queue() for _ in range(worker_count)], queue.Queue())
    for w in range(worker_count):
        mine = [p for p in range(kappa) if p % worker_count == w]
        t = threading.Thread(
            target=_worker_main,
            args=(mine, config, dataset, pool.inboxes[w], pool.outbox, wire, gate),
            name=f"pgap-worker-{w}",
            daemon=True,
        )
        t.start()
        pool.threads.append(t)

    def send(w, msg):
        pool.inboxes[w].put(encode_message(msg) if wire else msg)
        pool.sent += 1

    try:
        for step in range(config.steps):
            scheme = partition_for(model, config, step)
            trainer.groups = scheme.groups
            sent0, recv0 = pool.sent, pool.received
            params = model.parameters()
            for p in range(kappa):
                send(p % worker_count, Distribute(
                    step, worker_seed(config.seed, step, p), p,
                    {k: v.copy() for k, v in params.items()},
                    {k: v.copy() for k, v in masks.items()},
                ))
            results, arrival = [], []
            for _ in range(kappa):
                try:
                    msg = pool.outbox.get(timeout=timeout)
                except queue.Empty:
                    missing = sorted(set(range(kappa)) - set(arrival))
                    raise StepAbort(step, f"no result from partitions {missing} within {timeout}s") from None
                pool.received += 1
                if wire and isinstance(msg, bytes):
                    msg = decode_message(msg)
                if isinstance(msg, _Failure):
                    raise StepAbort(step, f"partition {msg.partition} failed: {msg.error}")
                if msg.step != step:
                    raise ProtocolError(f"result for step {msg.step} during step {step}")
                results.append(msg)
                arrival.append(msg.partition)
            record.messages_per_step.append((pool.sent - sent0) + (pool.received - recv0))

            ownership = {lin.name: 0 for lin in model.linears()}
            for p, group in enumerate(scheme.groups):
                for name in group:
                    ownership[name] = p
            try:
                dense = combine(params, results, ownership)
            except ProtocolError as exc:
                raise StepAbort(step, str(exc)) from exc
            for key, arr in dense.items():
                params[key][...] = arr
            model.touch()
            masks.update(arg_grow_to(masks))
            record.coverage.update(masks)
            trainer.log("combine", step, step, arrival=arrival)

            weights = {n: model.layer(n).weight for n in layers}
            pruned, new = arg_prune_to(weights, policy, layers)
            delta2 = mask_relative_error(weights, new)
            write_weights(model, pruned)
            masks.update(new)
            trainer.log("prune", step, step, delta2=delta2)
            if on_step is not None:
                on_step(step, model, masks)
    except GaPError as exc:
        if isinstance(exc, StepAbort):
            raise
        raise StepAbort(step, str(exc)) from exc
    finally:
        for w in range(worker_count):
            pool.inboxes[w].put(encode_message(Shutdown()) if wire else Shutdown())
        for t in pool.threads:
            t.join(timeout=1.0)

    trainer.reset_momentum()
    trainer.train(config.finetune_epochs, None, None)
    trainer.finish()
    return model, masks, record
