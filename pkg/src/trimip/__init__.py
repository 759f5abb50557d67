"""Tri-plane mipmap radiance fields."""
