"""
Loader: worker threads that augment samples ahead of the trainer.

A feeder thread walks the per-epoch shuffled order and submits each sample to a
thread pool; the resulting futures go into a bounded queue in order, so the
trainer sees the same batches regardless of how many workers run. Every sample
draws its augmentation from
``derive_seed(seed, augment_cfg.seed, index, epoch, draw)``.
"""
import logging
import queue
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .augment import augment_sample, fill_color, normalize
from .data import AnnotatedImage, derive_seed
from .errors import ConfigError, FaceSSDError
from .models import AugmentConfig, DatasetStats

logger = logging.getLogger("facessd.loader")

# draw id of fresh samples; recycled samples use the batch number + 1
FRESH_DRAW = 0


@dataclass
class LoadedSample:
    """An augmented sample ready for the network."""
    index: int
    sample: AnnotatedImage
    image: np.ndarray
    recycled: bool = False


@dataclass
class Batch:
    number: int
    epoch: int
    samples: List[LoadedSample] = field(default_factory=list)

    @property
    def indices(self) -> List[int]:
        return [s.index for s in self.samples]

    @property
    def num_recycled(self) -> int:
        return sum(s.recycled for s in self.samples)

    def __len__(self) -> int:
        return len(self.samples)


class BatchLoader:
    """
    Minibatch producer with hard-sample recycling.

    Usage:
        loader = BatchLoader(images, AugmentConfig(), stats, batch_size=16)
        loader.start()
        batch = loader.next_batch()
        batch = loader.next_batch(recycled_indices=[3, 7])
        loader.stop()
    """

    def __init__(
        self,
        dataset: Sequence[AnnotatedImage],
        augment_cfg: Optional[AugmentConfig],
        stats: DatasetStats,
        batch_size: int = 16,
        num_workers: int = 2,
        seed: int = 0,
        prefetch: Optional[int] = None
    ):
        """
        Args:
            dataset: training images (raw pixels in [0, 1])
            augment_cfg: augmentation settings; None disables augmentation
            stats: dataset statistics used for normalisation and the fill colour
            batch_size: samples per batch, recycled ones included
            num_workers: augmentation threads
            seed: global seed for shuffling and augmentation
            prefetch: queue bound in samples (default two batches)
        """
        if not dataset:
            raise ConfigError("cannot load batches from an empty dataset")
        if batch_size < 1 or num_workers < 1:
            raise ConfigError(f"batch_size and num_workers must be >= 1, got {batch_size}, {num_workers}")
        self.dataset = list(dataset)
        self.augment_cfg = augment_cfg
        self.stats = stats
        self.batch_size = batch_size
        self.num_workers = num_workers
        self.seed = seed
        self.prefetch = prefetch or 2 * batch_size
        self.fill = fill_color(stats)

        self._queue: "queue.Queue[Future]" = queue.Queue(maxsize=self.prefetch)
        self._executor: Optional[ThreadPoolExecutor] = None
        self._feeder: Optional[threading.Thread] = None
        self._stop_event = threading.Event()

        # Statistics
        self.batches_served = 0
        self.samples_served = 0
        self.recycled_served = 0
        self.current_epoch = 0
        self.start_time = None

        self.running = False

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> "BatchLoader":
        if self.running:
            logger.warning("BatchLoader already running")
            return self
        self.running = True
        self.start_time = time.time()
        self._stop_event.clear()
        self._executor = ThreadPoolExecutor(max_workers=self.num_workers, thread_name_prefix="facessd-loader")
        self._feeder = threading.Thread(target=self._feed_loop, name="facessd-feeder", daemon=True)
        self._feeder.start()
        logger.info(
            f"STARTED | samples={len(self.dataset)} | batch={self.batch_size} | "
            f"workers={self.num_workers} | prefetch={self.prefetch}"
        )
        return self

    def stop(self) -> None:
        if not self.running:
            return
        self.running = False
        self._stop_event.set()
        # unblock a feeder waiting on a full queue
        while True:
            try:
                self._queue.get_nowait().cancel()
            except queue.Empty:
                break
        if self._feeder is not None:
            self._feeder.join(timeout=5.0)
        if self._executor is not None:
            self._executor.shutdown(wait=True, cancel_futures=True)
        self._feeder = None
        self._executor = None
        self._queue = queue.Queue(maxsize=self.prefetch)
        logger.info(f"STOPPED | batches={self.batches_served} | recycled={self.recycled_served}")

    def __enter__(self) -> "BatchLoader":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- sample preparation ------------------------------------------------------

    def epoch_order(self, epoch: int) -> np.ndarray:
        """Shuffled sample order of one epoch; pure in (seed, epoch)."""
        rng = np.random.default_rng(derive_seed(self.seed, epoch))
        return rng.permutation(len(self.dataset))

    def prepare(self, index: int, epoch: int, draw: int = FRESH_DRAW, recycled: bool = False) -> LoadedSample:
        """Augment and normalise one sample with its derived seed."""
        sample = self.dataset[index]
        if self.augment_cfg is not None:
            rng = np.random.default_rng(derive_seed(self.seed, self.augment_cfg.seed, index, epoch, draw))
            sample = augment_sample(sample, self.augment_cfg, rng, self.fill)
        return LoadedSample(index=index, sample=sample, image=normalize(sample.image, self.stats), recycled=recycled)

    def _feed_loop(self) -> None:
        epoch = 0
        while not self._stop_event.is_set():
            for index in self.epoch_order(epoch).tolist():
                future = self._executor.submit(self.prepare, index, epoch)
                future.epoch = epoch
                while not self._stop_event.is_set():
                    try:
                        self._queue.put(future, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop_event.is_set():
                    future.cancel()
                    return
            epoch += 1

    # -- consumer side -------------------------------------------------------------

    def next_batch(self, recycled_indices: Sequence[int] = ()) -> Batch:
        """
        Next minibatch.

        Recycled samples come first, each once, with a fresh augmentation draw;
        the remaining slots are filled from the epoch order. Recycled indices
        beyond the batch size are dropped.
        """
        if not self.running:
            raise FaceSSDError("BatchLoader is not running; call start() first")
        number = self.batches_served
        seen = set()
        recycled = []
        for index in recycled_indices:
            index = int(index)
            if not 0 <= index < len(self.dataset):
                raise ConfigError(f"recycled index {index} outside dataset of {len(self.dataset)}")
            if index not in seen:
                seen.add(index)
                recycled.append(index)
        recycled = recycled[:self.batch_size]

        pending = [
            self._executor.submit(self.prepare, index, self.current_epoch, number + 1, True)
            for index in recycled
        ]
        samples = [future.result() for future in pending]

        while len(samples) < self.batch_size:
            future = self._queue.get()
            self.current_epoch = future.epoch
            samples.append(future.result())

        self.batches_served += 1
        self.samples_served += len(samples)
        self.recycled_served += len(recycled)
        logger.debug(f"BATCH | number={number} | epoch={self.current_epoch} | recycled={len(recycled)}")
        return Batch(number=number, epoch=self.current_epoch, samples=samples)

    def get_stats(self) -> dict:
        """Loader statistics."""
        uptime = time.time() - self.start_time if self.start_time else 0
        return {
            "num_samples": len(self.dataset),
            "batch_size": self.batch_size,
            "num_workers": self.num_workers,
            "batches_served": self.batches_served,
            "samples_served": self.samples_served,
            "recycled_served": self.recycled_served,
            "epoch": self.current_epoch,
            "queue_depth": self._queue.qsize(),
            "samples_per_second": self.samples_served / uptime if uptime > 0 else 0,
            "is_running": self.running,
        }
