import os
import sys

# Set environment variables before any imports
env_vars = {
    "MOEFED_PACKAGE_SECRET": "test_secret",
    "MOEFED_SERVER_URL": "http://testserver",
    "MOEFED_LOG_LEVEL": "INFO",
    "PORT": "8000",
}

for key, value in env_vars.items():
    os.environ[key] = value
os.environ.pop("MOEFED_CONFIG", None)

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))
