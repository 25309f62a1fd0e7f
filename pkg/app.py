"""
Lesionseg Results Dashboard
Browse a run directory: loss curves, test metrics, threshold sweep, ablations and heatmaps
Run: streamlit run app.py
"""

import glob
import os

import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
import streamlit as st
from dotenv import load_dotenv
from PIL import Image

from config import ENV_OUTPUT_DIR
from metrics import read_report
from trainer import EPOCH_LOG

load_dotenv()

st.set_page_config(
    page_title="Lesionseg Results",
    page_icon="🩻",
    layout="wide",
    initial_sidebar_state="expanded"
)

st.markdown("""
<style>
    .stApp {
        background: #f8f9fa;
    }

    [data-testid="stSidebar"] {
        background: linear-gradient(180deg, #1e3c72 0%, #2a5298 100%);
    }

    [data-testid="stSidebar"] * {
        color: #ffffff !important;
    }

    h1 {
        background: linear-gradient(135deg, #667eea 0%, #764ba2 100%);
        -webkit-background-clip: text;
        -webkit-text-fill-color: transparent;
        font-weight: 800;
        font-size: 2.5rem !important;
    }

    .metric-card {
        background: white;
        border-radius: 15px;
        padding: 1.2rem;
        box-shadow: 0 4px 15px rgba(0,0,0,0.08);
        border-left: 5px solid #667eea;
    }

    .metric-label {
        color: #718096;
        font-size: 0.9rem;
        font-weight: 600;
    }

    .metric-value {
        color: #2d3748;
        font-size: 2rem;
        font-weight: 800;
    }
</style>
""", unsafe_allow_html=True)

LOSS_COLUMNS = ["l_cls", "l_dice", "l_focal", "l_seg", "l_mc", "l_total"]


def metric_card(label, value):
    text = "n/a" if value is None else f"{value:.2f}%"
    st.markdown(f"""
    <div class="metric-card">
        <div class="metric-label">{label}</div>
        <div class="metric-value">{text}</div>
    </div>
    """, unsafe_allow_html=True)


st.markdown("<h1>🩻 Lesionseg Results Dashboard</h1>", unsafe_allow_html=True)
st.markdown("<p style='color: #718096; font-size: 1.1rem;'>Training curves, segmentation metrics and ablations for one run directory</p>", unsafe_allow_html=True)

# Sidebar
st.sidebar.markdown("## 📁 Run")
st.sidebar.markdown("---")
run_dir = st.sidebar.text_input("Output directory", os.getenv(ENV_OUTPUT_DIR, "runs/desk"))
if not os.path.isdir(run_dir):
    st.warning(f"⚠️ Directory not found: {run_dir}. Train a model first (python main.py train --config configs/desk.cfg).")
    st.stop()

# Training curves
st.markdown("## 📉 Training Loss")
log_path = os.path.join(run_dir, EPOCH_LOG)
if os.path.exists(log_path):
    log = pd.read_csv(log_path)
    shown = st.sidebar.multiselect("Loss terms", LOSS_COLUMNS, default=["l_cls", "l_seg", "l_total"])
    long_log = log.melt(id_vars="epoch", value_vars=[c for c in shown if c in log], var_name="term", value_name="loss")
    fig_loss = px.line(long_log, x="epoch", y="loss", color="term", markers=True)
    fig_loss.update_layout(height=350, margin=dict(l=0, r=0, t=30, b=0),
                           plot_bgcolor='rgba(0,0,0,0)', paper_bgcolor='rgba(0,0,0,0)')
    st.plotly_chart(fig_loss, use_container_width=True)

    evaluated = log.dropna(subset=["test_dice"])
    if not evaluated.empty:
        fig_eval = go.Figure()
        fig_eval.add_trace(go.Scatter(x=evaluated["epoch"], y=evaluated["test_dice"], name="Dice %", mode="lines+markers"))
        fig_eval.add_trace(go.Scatter(x=evaluated["epoch"], y=evaluated["test_accuracy"], name="Accuracy %", mode="lines+markers"))
        fig_eval.update_layout(height=300, margin=dict(l=0, r=0, t=30, b=0), yaxis_title="percent")
        st.plotly_chart(fig_eval, use_container_width=True)
else:
    st.info("📊 No epoch_log.csv in this directory yet.")

st.markdown("---")

# Test metrics
st.markdown("## 📈 Test Metrics")
report_path = os.path.join(run_dir, "report.txt")
if os.path.exists(report_path):
    report = read_report(report_path)
    col1, col2, col3, col4 = st.columns(4)
    with col1:
        metric_card("Dice", report.get("dice_percent"))
    with col2:
        metric_card("Accuracy", report.get("accuracy_percent"))
    with col3:
        metric_card("Pixel AUROC", report.get("pauc_percent"))
    with col4:
        metric_card("Image AUROC", report.get("image_auroc_percent"))

    sweep_path = os.path.join(run_dir, "sweep.csv")
    if os.path.exists(sweep_path):
        sweep = pd.read_csv(sweep_path, index_col="metric").T.reset_index()
        sweep.columns = ["threshold", "dice_percent"]
        st.markdown("### 🎚️ Threshold Sweep")
        fig_sweep = px.bar(sweep, x="threshold", y="dice_percent", text="dice_percent",
                           color="dice_percent", color_continuous_scale="Blues")
        fig_sweep.update_traces(texttemplate="%{text:.2f}", textposition="outside")
        fig_sweep.update_layout(showlegend=False, height=320, margin=dict(l=0, r=0, t=30, b=0))
        st.plotly_chart(fig_sweep, use_container_width=True)
else:
    st.info("🔍 No report.txt yet. Run: python main.py evaluate")

st.markdown("---")

# Ablations
st.markdown("## 🧪 Ablations")
tables = sorted(glob.glob(os.path.join(run_dir, "ablation_*.csv")))
if tables:
    for path in tables:
        kind = os.path.basename(path)[len("ablation_"):-len(".csv")]
        table = pd.read_csv(path)
        st.markdown(f"### {kind.title()}")
        st.dataframe(table, use_container_width=True, hide_index=True)
        st.download_button(f"📥 Download {kind} table", table.to_csv(index=False),
                           file_name=os.path.basename(path), mime="text/csv")
else:
    st.info("No ablation tables. Run: python main.py ablate-components")

st.markdown("---")

# Heatmaps
st.markdown("## 🔥 Heatmaps")
panels = sorted(glob.glob(os.path.join(run_dir, "panels", "*.ppm")))
if panels:
    picked = st.selectbox("Test image", [os.path.basename(p)[:-4] for p in panels])
    panel = np.asarray(Image.open(os.path.join(run_dir, "panels", f"{picked}.ppm")))
    st.image(panel, caption="image | ground truth | predicted anomaly map", use_container_width=True, clamp=True)
else:
    st.info("No panels exported. Run: python main.py export-heatmap")
