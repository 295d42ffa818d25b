from .layer_task import LayerTask
