"""Provides a context variable for logging run-specific information.

This module defines a ContextVar that stores the currently executing run
tag, such as "oned_linear/osEKI_2" or "osQN_1/stage-12". Logging filters
read this variable to tag every log message with the active run. Worker
threads started by joblib do not inherit it and log under the default tag.

Usage:
    from oneshot_eki.logging_context import run_context
    token = run_context.set("oned_linear/osEKI_2")
    ...
    run_context.reset(token)
"""

import contextvars

run_context = contextvars.ContextVar("run", default=__package__)
