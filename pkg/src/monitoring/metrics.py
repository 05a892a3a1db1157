"""
Metrics collection for training and inference runs.
"""
from pathlib import Path
from typing import Any, Dict, Optional, Union

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile

from utils.logger import setup_logger

logger = setup_logger(__name__)

INFERENCE_BUCKETS = (0.1, 0.5, 1.0, 2.5, 5.0, 10.0, 30.0, 60.0, 120.0)


class TrainingMetrics:
    """Class for collecting and exporting training/inference metrics."""

    def __init__(self, prometheus_client: Optional[Dict[str, Any]] = None, registry: Optional[CollectorRegistry] = None):
        self.prometheus_client = prometheus_client or {
            'Counter': Counter,
            'Gauge': Gauge,
            'Histogram': Histogram
        }
        # one registry per instance
        self.registry = registry or CollectorRegistry()

        self.iteration_counter = self.prometheus_client['Counter'](
            'segmentation_train_iterations_total',
            'Training iterations completed',
            registry=self.registry
        )
        self.validation_counter = self.prometheus_client['Counter'](
            'segmentation_validations_total',
            'Validation events run during training',
            ['checkpointed'],
            registry=self.registry
        )
        self.loss_gauge = self.prometheus_client['Gauge'](
            'segmentation_train_loss',
            'Loss of the most recent training iteration',
            registry=self.registry
        )
        self.best_dice_gauge = self.prometheus_client['Gauge'](
            'segmentation_best_mean_dice',
            'Best mean validation Dice so far',
            registry=self.registry
        )
        self.class_weight_gauge = self.prometheus_client['Gauge'](
            'segmentation_class_weight',
            'Loss weight currently applied per class',
            ['class_name'],
            registry=self.registry
        )
        self.inference_histogram = self.prometheus_client['Histogram'](
            'segmentation_inference_seconds',
            'Wall-clock seconds to segment one case',
            buckets=INFERENCE_BUCKETS,
            registry=self.registry
        )

    def record_iteration(self, loss: float) -> None:
        self.iteration_counter.inc()
        self.loss_gauge.set(loss)

    def record_class_weights(self, weights: Dict[str, float]) -> None:
        for class_name, value in weights.items():
            self.class_weight_gauge.labels(class_name=class_name).set(value)

    def record_validation(self, mean_dice: float, checkpointed: bool, best_dice: float) -> None:
        self.validation_counter.labels(checkpointed=str(checkpointed).lower()).inc()
        self.best_dice_gauge.set(best_dice)
        if checkpointed:
            logger.info("new best validation dice", mean_dice=round(mean_dice, 4))

    def record_inference_time(self, seconds: float) -> None:
        self.inference_histogram.observe(seconds)

    def write_textfile(self, path: Union[str, Path]) -> Path:
        """Dump the registry in the text exposition format."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            write_to_textfile(str(path), self.registry)
        except OSError as e:
            logger.error("failed to write metrics", path=str(path), error=str(e))
            raise
        return path
