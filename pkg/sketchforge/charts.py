"""
Plotly reports: training losses, recognition accuracy, and the smoothing study.
Charts are written as standalone HTML files.
"""

import logging

import pandas as pd
import plotly.graph_objects as go

from sketchforge.fileio import PathLike, atomic_write

logger = logging.getLogger(__name__)

ACCENT = '#7c3aed'
PALETTE = ['#7c3aed', '#0ea5e9', '#f59e0b', '#10b981', '#ef4444']


def _axis(title: str, **extra) -> dict:
    return dict(
        title=title,
        gridcolor='#f1f5f9',
        title_font=dict(size=12, color='#0f172a'),
        tickfont=dict(size=11, color='#475569'),
        **extra
    )


def _layout(fig: go.Figure, x_title: str, y_title: str, showlegend: bool = False, **y_extra) -> go.Figure:
    fig.update_layout(
        height=300,
        margin=dict(l=20, r=20, t=20, b=40),
        xaxis=_axis(x_title),
        yaxis=_axis(y_title, **y_extra),
        plot_bgcolor='white',
        paper_bgcolor='white',
        hovermode='x unified',
        showlegend=showlegend
    )
    return fig


def history_chart(history: pd.DataFrame) -> go.Figure:
    """One line per loss column of a training history frame, log-scaled."""
    fig = go.Figure()
    losses = [col for col in history.columns if col.startswith('L_')]
    for color, col in zip(PALETTE * 2, losses):
        fig.add_trace(go.Scatter(
            x=history['iter'],
            y=history[col],
            mode='lines',
            name=col,
            line=dict(color=color, width=2),
            hovertemplate=f'<b>Iteration %{{x}}</b><br>{col}: %{{y:.4g}}<extra></extra>'
        ))
    return _layout(fig, 'Iteration', 'Loss', showlegend=True, type='log')


def recognition_chart(curve: pd.DataFrame) -> go.Figure:
    """Accuracy against the number of discriminant dimensions."""
    fig = go.Figure()
    fig.add_trace(go.Scatter(
        x=curve['dims'],
        y=curve['accuracy'] * 100,
        mode='lines+markers',
        name='Accuracy',
        line=dict(color=ACCENT, width=3),
        marker=dict(size=10, color=ACCENT),
        hovertemplate='<b>%{x} dims</b><br>Accuracy: %{y:.1f}%<extra></extra>'
    ))
    return _layout(fig, 'Dimensions', 'Accuracy %', range=[0, 105])


def smoothing_chart(means: dict) -> go.Figure:
    """Mean SSIM and FSIM before and after bilateral smoothing."""
    fig = go.Figure()
    metrics = ['ssim', 'fsim']
    fig.add_trace(go.Bar(
        x=[m.upper() for m in metrics],
        y=[means.get(m, 0.0) for m in metrics],
        name='Raw',
        marker=dict(color='#cbd5e1', line=dict(width=0)),
        hovertemplate='<b>%{x}</b><br>Raw: %{y:.4f}<extra></extra>'
    ))
    if any(f'{m}_smoothed' in means for m in metrics):
        fig.add_trace(go.Bar(
            x=[m.upper() for m in metrics],
            y=[means.get(f'{m}_smoothed', 0.0) for m in metrics],
            name='Smoothed',
            marker=dict(color=ACCENT, line=dict(width=0)),
            hovertemplate='<b>%{x}</b><br>Smoothed: %{y:.4f}<extra></extra>'
        ))
    fig = _layout(fig, 'Metric', 'Mean score', showlegend=True, range=[0, 1.05])
    fig.update_layout(barmode='group', bargap=0.2)
    return fig


def write_chart(path: PathLike, fig: go.Figure) -> None:
    atomic_write(path, fig.to_html(include_plotlyjs='cdn', full_html=True).encode('utf-8'))
    logger.info("Wrote chart %s", path)
