VERSION = "0.3.0"

DATA_DIR_ENV = "FUSION_DATA_DIR"

IDX_MAGIC_LABELS = 0x00000801
IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_IMAGES_4D = 0x00000804

CHECKPOINT_MAGIC = b'FSCK'
CHECKPOINT_VERSION = 1
DISTRIBUTION_MAGIC = b'FSTD'
DISTRIBUTION_VERSION = 1
# magic(4) version(2) checksum(2) payload_len(4)
CONTAINER_HEADER = '!4sHHI'
CONTAINER_HEADER_SIZE = 12

BALANCED_MODES = ('off', 'threshold', 'augment', 'weighted')
UPDATE_MODES = ('meml', 'mean', 'single', 'multi')
EXPERIMENT_KINDS = (
    'fusion_meml',
    'fusion_memlx',
    'cl_bench',
    'ablation_single_vs_multi',
    'ablation_balanced_vs_unbalanced',
)
CL_METHODS = ('naive', 'er', 'meml', 'memlx')

MIN_LOSS_WEIGHT = 0.25
MAX_LOSS_WEIGHT = 4.0

# Passes over the seen classes when fitting the fresh head at meta-test.
META_TEST_EPOCHS = 50

# Every legal config key, its default, and the types it accepts.
# A default of None means "derived at run time" (or required for some kinds).
DEFAULTS = {
    'kind': (None, (str,)),
    'seeds': ([0, 1, 2, 3, 4], (list,)),
    'out_dir': ('runs/latest', (str,)),
    'run.workers': (1, (int,)),
    'run.progress': (False, (bool,)),
    'run.log_every': (500, (int,)),

    'dataset.kind': ('synthetic', (str,)),
    'dataset.images': (None, (str,)),
    'dataset.labels': (None, (str,)),
    'dataset.test_images': (None, (str,)),
    'dataset.test_labels': (None, (str,)),
    'synthetic.num_classes': (30, (int,)),
    'synthetic.min_per_class': (10, (int,)),
    'synthetic.max_per_class': (30, (int,)),
    'synthetic.image_size': (28, (int,)),
    'synthetic.noise': (0.0, (int, float)),
    'synthetic.seed': (1234, (int,)),
    'split.train': (20, (int,)),
    'split.val': (0, (int,)),
    'split.test': (10, (int,)),

    'model.conv_channels': (32, (int,)),
    'model.conv_strides': ([2, 2, 1, 1], (list,)),
    'model.mlp_hidden': ([100, 100], (list,)),
    'model.cln_hidden': ([128], (list,)),
    'model.attention_hidden': (None, (int,)),

    'embed.latent_dim': (16, (int,)),
    'embed.hidden': (128, (int,)),
    'embed.epochs': (30, (int,)),
    'embed.lr': (1e-3, (int, float)),
    'embed.batch': (32, (int,)),
    'cluster.k': (20, (int,)),
    'cluster.max_iters': (100, (int,)),
    'tasks.min_cluster_size': (3, (int,)),
    'tasks.query_random_count': (10, (int,)),
    'tasks.balanced_mode': ('off', (str,)),
    'tasks.balance_size': (None, (int,)),
    'tasks.supervised': (False, (bool,)),

    'meta.steps': (2000, (int,)),
    'meta.alpha': (0.1, (int, float)),
    'meta.beta': (1e-4, (int, float)),
    'meta.update_mode': ('meml', (str,)),
    'meta.outer_optimizer': ('adam', (str,)),
    'meta.m': (3, (int,)),
    'meta.reset_head_row': (False, (bool,)),

    'aug.brightness': (0.2, (int, float)),
    'aug.contrast_low': (0.8, (int, float)),
    'aug.contrast_high': (1.2, (int, float)),
    'aug.saturation': (0.2, (int, float)),
    'aug.hue': (0.05, (int, float)),
    'aug.max_shift': (2, (int,)),

    'test.shots': (5, (int,)),
    'test.task_counts': ([2, 4, 6, 8, 10], (list,)),
    'test.epochs': (META_TEST_EPOCHS, (int,)),
    'test.lr': (None, (int, float)),

    'cl.methods': (['naive', 'er', 'meml'], (list,)),
    'cl.classes_per_task': (2, (int,)),
    'cl.buffer': (500, (int,)),
    'cl.batch': (10, (int,)),
    'cl.epochs': (1, (int,)),
    'cl.lr': (0.1, (int, float)),
    'cl.alpha': (0.1, (int, float)),
    'cl.beta': (0.1, (int, float)),
}
