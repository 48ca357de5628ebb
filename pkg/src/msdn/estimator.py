"""scikit-learn style wrapper around the trainer."""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import STRONG, WEAK, Sample, boxes_from_mask, compute_stats
from .errors import DataError, DimensionError
from .model import detect
from .objectives import Box
from .tensor import Tensor, no_grad
from .train import TrainConfig, Trainer, mean_dice, predict_labels


def _as_images(X):
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1:
        raise DimensionError(f"expected images shaped [N,H,W] or [N,1,H,W], got {X.shape}")
    return X


def _as_masks(y, n, hw):
    y = check_array(y, allow_nd=True, dtype=None, ensure_2d=False)
    if y.shape != (n,) + hw:
        raise DimensionError(f"masks must be shaped {(n,) + hw}, got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise DataError("masks must hold integer class labels")
        y = y.astype(np.int64)
    return y


class MSDNSegmenter(BaseEstimator):
    """Mixed-supervision segmenter.

    ``fit`` accepts dense masks for every image plus an optional boolean
    ``strong`` vector; images marked weak contribute only their boxes (taken
    from ``boxes`` or, when omitted, derived from the mask).
    """

    def __init__(self, model="msdn", lr=1e-4, batch_size=4, max_epochs=300, plateau_patience=5,
                 early_stop_patience=20, dropout=0.1, base_channels=8, head_channels=256, augment=True,
                 seed=0):
        self.model = model
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.plateau_patience = plateau_patience
        self.early_stop_patience = early_stop_patience
        self.dropout = dropout
        self.base_channels = base_channels
        self.head_channels = head_channels
        self.augment = augment
        self.seed = seed

    def _samples(self, X, y, strong=None, boxes=None, prefix="x"):
        n = len(X)
        strong = np.ones(n, dtype=bool) if strong is None else np.asarray(strong, dtype=bool)
        if strong.shape != (n,):
            raise DimensionError(f"strong flags must have length {n}, got {strong.shape}")
        if boxes is not None and len(boxes) != n:
            raise DimensionError(f"boxes must list one entry per image ({n}), got {len(boxes)}")
        out = []
        for i in range(n):
            if boxes is not None and boxes[i] is not None:
                bx = [b if isinstance(b, Box) else Box.from_list(b) for b in boxes[i]]
            else:
                bx = boxes_from_mask(y[i])
            out.append(Sample(X[i], y[i], bx, STRONG if strong[i] else WEAK, f"{prefix}{i}"))
        return out

    def _scale(self, X):
        return ((X - self.mean_) / self.std_).astype(np.float32)

    def fit(self, X, y, strong=None, boxes=None, X_val=None, y_val=None):
        X = _as_images(X)
        y = _as_masks(y, len(X), X.shape[2:])
        self.num_classes_ = max(1, int(y.max()))
        self.mean_, self.std_ = compute_stats([Sample(x, None, [], STRONG, "") for x in X])
        train = self._samples(self._scale(X), y, strong, boxes)
        if X_val is None:
            val = [s for s in train if s.kind == STRONG] or train
        else:
            Xv = _as_images(X_val)
            val = self._samples(self._scale(Xv), _as_masks(y_val, len(Xv), Xv.shape[2:]), prefix="v")
        config = TrainConfig(model=self.model, lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                             plateau_patience=self.plateau_patience, early_stop_patience=self.early_stop_patience,
                             dropout=self.dropout, base_channels=self.base_channels,
                             head_channels=self.head_channels, augment=self.augment, seed=self.seed,
                             num_classes=self.num_classes_, image_size=int(X.shape[-1]))
        trainer = Trainer(config, train, val)
        self.log_ = trainer.fit()
        if trainer.best_state is not None:
            trainer.model.load_state_dict(trainer.best_state)
        self.network_ = trainer.model
        self.network_.eval()
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = self._scale(_as_images(X))
        with no_grad():
            return np.concatenate([self.network_.forward_strong(Tensor(X[i:i + 8])).data
                                   for i in range(0, len(X), 8)])

    def predict(self, X):
        check_is_fitted(self, "network_")
        return predict_labels(self.network_, self._scale(_as_images(X)))

    def score(self, X, y):
        """Mean foreground Dice over images."""
        check_is_fitted(self, "network_")
        X = _as_images(X)
        y = _as_masks(y, len(X), X.shape[2:])
        return mean_dice(self.network_, self._samples(self._scale(X), y))

    def predict_boxes(self, X, threshold=0.5, iou=0.5):
        """Per image list of ``(Box, score)`` from the detection unit after NMS."""
        check_is_fitted(self, "network_")
        return detect(self.network_, self._scale(_as_images(X)), threshold, iou)
