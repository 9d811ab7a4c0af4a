"""Python interface to the TokenSeg sparse-token segmentation core.

The heavy lifting lives in the compiled `_tokenseg` extension; this package
re-exports its functions under a stable name.  Volumes are numpy float32
arrays of shape (D, H, W), masks are uint8 arrays of the same shape.
"""

try:
    # installed wheel: the extension sits inside the package
    from ._tokenseg import (
        default_config,
        dice,
        evaluate,
        generate_phantom,
        hd95,
        infer,
        iou,
        load_mask,
        load_volume,
        normalize,
        quantize,
        save_mask,
        save_volume,
        train,
    )
except ImportError:
    # in-tree build: the extension is on sys.path next to the build dir
    from _tokenseg import (
        default_config,
        dice,
        evaluate,
        generate_phantom,
        hd95,
        infer,
        iou,
        load_mask,
        load_volume,
        normalize,
        quantize,
        save_mask,
        save_volume,
        train,
    )

__all__ = [
    "default_config",
    "dice",
    "evaluate",
    "generate_phantom",
    "hd95",
    "infer",
    "iou",
    "load_mask",
    "load_volume",
    "normalize",
    "quantize",
    "save_mask",
    "save_volume",
    "train",
]

__version__ = "0.1.0"
