"""Decentralized IoT data and control exchange: DID-identified devices,
owner-issued access credentials, single-use credential ids, and
per-customer privacy filtering."""

__version__ = "0.1.0"
