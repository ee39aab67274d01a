# ------------------------ CLPM SETTINGS ------------------------------------
# standalone settings for running the clpm app from manage.py or the clpm console script; projects that install the
# app can copy the CLPM_DEFAULTS and LOGGING blocks into their own settings instead
import os
import sys
import pathlib
from ubercode.utils.logging import ColorLogger
from ubercode.utils.environment import Environment

this_module = sys.modules[__name__]
LOG_IN_COLOR = Environment().override_variable("LOG_IN_COLOR", True)
settings_logger = ColorLogger("clpm.settings", color_output=LOG_IN_COLOR)

BASE_DIR = pathlib.Path(__file__).resolve().parent.parent
DEBUG = False
# no sessions or admin are served; the key only satisfies django's startup checks
# NOTE: set a CLPM_SECRET_KEY environment variable if the app is ever mounted in a served project
SECRET_KEY = 'clpm-standalone-not-secret'
INSTALLED_APPS = [
    'clpm',
]
# the app keeps no models; every artifact is a file in the run's output directory
DATABASES = {}
USE_TZ = True

# defaults for every run; the --config file and explicit flags override them (see clpm.conf)
CLPM_DEFAULTS = {
    'd': 2,
    'K': 15,
    'tau': 1.0,
    'epochs': 500,
    'lr_phi': 0.01,
    'lr_beta': 1e-5,
    'riemann_R': 10,
    'kind': 'euclidean',
    'elbo_samples': 1,
    'seed': 0,
    'threads': 1,
    'log_every': 50,
    'test_frac': 0.1,
    'val_frac': 0.0,
    'draws': 100,
}

# add logging and our loggers
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '%(levelname)s %(asctime)s %(module)s %(process)d %(thread)d %(message)s'
        },
        'simple': {
            'format': '%(levelname)s %(name)s %(message)s'
        },
    },
    'handlers': {
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'simple'
        },
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': 'INFO',
            'propagate': True,
        },
        'clpm': {
            'handlers': ['console'],
            'level': 'INFO',
            'propagate': False,
        },
    }
}

# Replace any CLPM_ prefixed environment variables in settings at startup (CLPM_DEBUG, CLPM_SECRET_KEY, ...)
env_prefix = "CLPM_"
for k, v in os.environ.items():
    if k.upper().startswith(env_prefix):
        attr_key = k[len(env_prefix):]
        # CLPM_SLOW_TESTS only switches the test suite
        if attr_key and attr_key != "SLOW_TESTS":
            setattr(this_module, attr_key, v)

DEBUG = Environment(logger=settings_logger).override_variable("CLPM_DEBUG", DEBUG)
if str(DEBUG).lower() in ('1', 'true', 'yes'):
    DEBUG = True
    for logger in LOGGING['loggers']:
        LOGGING['loggers'][logger]['level'] = 'DEBUG'
else:
    DEBUG = False
    # never show debugging info unless asked for; demote any DEBUG logger to INFO
    for logger in LOGGING['loggers']:
        if LOGGING['loggers'][logger]['level'] == 'DEBUG':
            LOGGING['loggers'][logger]['level'] = 'INFO'
# ------------------------ CLPM SETTINGS ------------------------------------
