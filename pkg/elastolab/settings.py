"""
Django settings for the elastolab project.

The project has no web surface: Django provides the settings layer, the
management-command CLI (``python manage.py elastolab ...``), the cache used
for filter banks and timing statistics, and the test runner.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# Application definition
# No models and no web surface, so no DATABASES, SECRET_KEY or ALLOWED_HOSTS.

INSTALLED_APPS = [
    'elastography',
]

MIDDLEWARE = []


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Cache Configuration
# https://docs.djangoproject.com/en/5.2/topics/cache/

CACHES = {
    'default': {
        'BACKEND': 'django.core.cache.backends.locmem.LocMemCache',
        'LOCATION': 'elastolab-filters',
        'TIMEOUT': 3600,
        'OPTIONS': {
            'MAX_ENTRIES': 256,
            'CULL_FREQUENCY': 3,
        }
    }
}

FILTER_BANK_CACHE_TIMEOUT = 3600  # 1 hour for FFT-domain filter responses
PERF_STATS_TIMEOUT = 3600  # 1 hour for timing statistics


# Logging

ELASTOLAB_LOG_LEVEL = os.environ.get('ELASTOLAB_LOG_LEVEL', 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'elastography': {
            'handlers': ['console'],
            'level': ELASTOLAB_LOG_LEVEL,
            'propagate': False,
        },
    },
}


# elastolab runtime defaults (overridable from .env)

ELASTOLAB_OUTPUT_DIR = Path(os.environ.get('ELASTOLAB_OUTPUT_DIR', BASE_DIR / 'runs'))
ELASTOLAB_CONFIG = os.environ.get('ELASTOLAB_CONFIG') or None


def _int_env(name: str, default: int) -> int:
    value = os.environ.get(name)
    try:
        return int(value) if value else default
    except ValueError:
        return default


ELASTOLAB_WORKERS = max(1, _int_env('ELASTOLAB_WORKERS', 1))
ELASTOLAB_TORCH_THREADS = max(1, _int_env('ELASTOLAB_TORCH_THREADS', 1))
ELASTOLAB_SLOW_TESTS = os.environ.get('ELASTOLAB_SLOW_TESTS', '0') == '1'
