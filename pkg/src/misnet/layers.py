import torch.nn as nn
import torch.nn.functional as F


class ConvBN(nn.Sequential):
    """Bias-free convolution followed by batch norm and an optional ReLU."""

    def __init__(self, in_channels, out_channels, kernel_size=3, padding=None, dilation=1, relu=True):
        if padding is None:
            if isinstance(kernel_size, int):
                padding = dilation * (kernel_size - 1) // 2
            else:
                padding = tuple(dilation * (k - 1) // 2 for k in kernel_size)
        layers = [
            nn.Conv2d(in_channels, out_channels, kernel_size, padding=padding,
                      dilation=dilation, bias=False),
            nn.BatchNorm2d(out_channels),
        ]
        if relu:
            layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


def resize_to(x, size):
    """Bilinear resize (corners not aligned); a no-op when the size already matches."""
    size = tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)
