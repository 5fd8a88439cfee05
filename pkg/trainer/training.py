"""Specialist training loop: Adam, weight decay 5e-4, early stopping."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from gnn_models import Graph, ParentGNN

HYPERPARAMS = {
    "gcn": {"lr": 1e-2, "max_epochs": 200},
    "sage": {"lr": 1e-2, "max_epochs": 200},
    "gin": {"lr": 1e-2, "max_epochs": 200},
    "gat": {"lr": 5e-3, "max_epochs": 300},
}
WEIGHT_DECAY = 5e-4
PATIENCE = 10


def train_parent(arch: str, dims: list[int], bundle: dict, train_mask: np.ndarray,
                 seed: int = 0, lr: float | None = None,
                 max_epochs: int | None = None, patience: int = PATIENCE,
                 weight_decay: float = WEIGHT_DECAY, verbose: bool = False):
    """Train one specialist on its train-mask nodes.

    Early stopping tracks full-graph validation accuracy with the given
    patience; the weights from the best validation epoch are restored
    before returning. Deterministic given the seed.
    """
    torch.manual_seed(seed)
    hp = HYPERPARAMS[arch]
    lr = hp["lr"] if lr is None else lr
    max_epochs = hp["max_epochs"] if max_epochs is None else max_epochs

    g = Graph(bundle["edges"], bundle["num_nodes"])
    X = torch.from_numpy(bundle["features"])
    y = torch.from_numpy(bundle["labels"])
    train_idx = torch.from_numpy(np.flatnonzero(train_mask))
    val_idx = torch.from_numpy(np.flatnonzero(bundle["masks"]["val"]))
    if len(train_idx) == 0:
        raise ValueError("training mask is empty")

    model = ParentGNN(arch, dims)
    opt = torch.optim.Adam(model.parameters(), lr=lr, weight_decay=weight_decay)

    # early stopping tracks validation loss (smoother than accuracy, the
    # usual planetoid convention); the best-loss weights are restored
    best_val_loss = float("inf")
    best_state = None
    best_epoch = 0
    for epoch in range(max_epochs):
        model.train()
        opt.zero_grad()
        logits = model(X, g)
        loss = F.cross_entropy(logits[train_idx], y[train_idx])
        if not torch.isfinite(loss):
            raise RuntimeError(f"training diverged at epoch {epoch} (loss={loss})")
        loss.backward()
        opt.step()

        model.eval()
        with torch.no_grad():
            logits = model(X, g)
            val_loss = float(F.cross_entropy(logits[val_idx], y[val_idx]))
        if val_loss < best_val_loss:
            best_val_loss = val_loss
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        elif epoch - best_epoch >= patience:
            break
        if verbose and epoch % 20 == 0:
            print(f"  epoch {epoch}: loss {float(loss):.4f} val_loss {val_loss:.4f}")

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    with torch.no_grad():
        logits = model(X, g)
        train_acc = float((logits[train_idx].argmax(1) == y[train_idx]).float().mean())
        val_acc = float((logits[val_idx].argmax(1) == y[val_idx]).float().mean())
    return model, {"val_acc": val_acc, "val_loss": best_val_loss,
                   "train_acc": train_acc, "stopped_epoch": best_epoch}


def model_logits(model: ParentGNN, bundle: dict) -> np.ndarray:
    model.eval()
    g = Graph(bundle["edges"], bundle["num_nodes"])
    with torch.no_grad():
        return model(torch.from_numpy(bundle["features"]), g).numpy()
