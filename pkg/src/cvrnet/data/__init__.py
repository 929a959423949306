from .augment import AugmentConfig, augment, geometric_transform
from .dataset import (
    Batch,
    ClassWeights,
    DatasetError,
    DatasetIndex,
    Fold,
    FoldPlan,
    ImageLoader,
    batches,
    check_fold_plan,
    class_weights,
    fixed_split_plan,
    load_and_resize,
    load_image,
    make_folds,
    one_hot,
    role_batches,
    scan_dataset,
    scan_fixed_split,
    write_dataset,
)
from .pnm import ImageFormatError, decode_pnm, encode_pnm, nearest_indices, read_pnm, resize_nearest, write_pnm
