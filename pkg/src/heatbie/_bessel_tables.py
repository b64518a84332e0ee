"""Chebyshev coefficients of exp(x) sqrt(x) K_n(x) in t = 4/x - 1 (generated)."""
import numpy as np

K0_CHEB = np.array([
    1.2201515410329777273,
    -3.1448101311964500543e-2,
    1.5698838857300533749e-3,
    -1.2849549581627802638e-4,
    1.3949813718876499364e-5,
    -1.8317555227191194848e-6,
    2.7668136394450150761e-7,
    -4.6604898976879476656e-8,
    8.5740340174142260858e-9,
    -1.6975345093890615156e-9,
    3.5773972814003284472e-10,
    -7.9574892444773970377e-11,
    1.855949114954926555e-11,
    -4.5145978833745191751e-12,
    1.1403405882073442347e-12,
    -2.9800969231481783548e-13,
    8.0328907750683743694e-14,
    -2.2275133267462963604e-14,
    6.3400764762766459658e-15,
    -1.8485933779209071686e-15,
    5.5120559994043333459e-16,
    -1.6782311257549005954e-16,
    5.2103917776435531399e-17,
    -1.6475805939842610645e-17,
    5.3004337711772849952e-18,
    -1.7331712005819831686e-18,
    5.7551092028800263827e-19,
    -1.9390956053120711539e-19,
])

K1_CHEB = np.array([
    1.3603130952422213347,
    1.0392373657681723844e-1,
    -2.8578168596227793868e-3,
    1.9521551847135163111e-4,
    -1.93619797416608296e-5,
    2.4064849478372171171e-6,
    -3.5019606030878125421e-7,
    5.7410841254500492923e-8,
    -1.0345762465678097027e-8,
    2.0150497551970346161e-9,
    -4.1903547593419255842e-10,
    9.2183151876053141258e-11,
    -2.1299678384277910216e-11,
    5.1396396734823435404e-12,
    -1.2891739609498229352e-12,
    3.3484196660522431201e-13,
    -8.9767051820101460691e-14,
    2.4771544242195986813e-14,
    -7.0198370892147688509e-15,
    2.038703166239860879e-15,
    -6.057047270643017803e-16,
    1.8380935752430453808e-16,
    -5.6894628491936473587e-17,
    1.7940510478863549755e-17,
    -5.7567444820732493831e-18,
    1.8778651901622045415e-18,
    -6.2216452873497811113e-19,
    2.0919125269765347712e-19,
])

