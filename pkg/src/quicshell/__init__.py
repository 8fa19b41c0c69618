"""quicshell: remote shell, exec and port forwarding over HTTP/3 Extended CONNECT."""

__version__ = "0.1.0"
