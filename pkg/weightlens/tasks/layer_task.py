from typing import Any, Callable, Dict, Optional, Tuple


class LayerTask:
    def __init__(self, task_id: str, fn: Callable[..., dict], args: Tuple = (), kwargs: Optional[dict] = None,
                 layer_name: Optional[str] = None, kind: str = "layer"):
        """
        One unit of per-layer work.

        :param task_id: Unique ID, e.g. ``"sparsity/run0/model.layers.0.mlp.up_proj.weight"``
        :param fn: Function computing the layer's JSON-serializable result dict
        :param args: Positional arguments to pass to the function
        :param kwargs: Keyword arguments to pass to the function
        :param layer_name: Layer this task reads, recorded in the task definition
        :param kind: Analysis kind, recorded in the task definition
        """
        self.task_id = task_id
        self.fn = fn
        self.args = args
        self.kwargs = kwargs or {}
        self.layer_name = layer_name
        self.kind = kind

    def get_id(self) -> str:
        return self.task_id

    def definition(self) -> Dict[str, Any]:
        return {"kind": self.kind, "layer": self.layer_name, "fn_name": getattr(self.fn, "__name__", repr(self.fn))}

    def __call__(self) -> dict:
        return self.fn(*self.args, **self.kwargs)
