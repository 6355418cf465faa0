"""Bundled experiment manifests (demo-2d.json is the full desk-scale suite)."""
