"""Never-setuid container runtime built on unprivileged user namespaces and FUSE."""

__version__ = "0.1.0"
